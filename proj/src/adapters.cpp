#include "inca/adapters.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "inca/error.hpp"
#include "inca/random.hpp"
#include "json.hpp"

namespace inca {

namespace {

constexpr double kInitStd = 0.02;
constexpr char kAdapterMagic[8] = {'I', 'N', 'C', 'A', 'D', 'P', 'T', '1'};

bool has_attention(AdapterKind k) { return k == AdapterKind::kInCA || k == AdapterKind::kOpenInCA; }

Tensor normal_tensor(Shape shape, std::uint64_t seed, double stddev) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  fill_normal(t.data(), rng, stddev);
  return t;
}

void validate(const AdapterSpec& s) {
  require(s.dim >= 1, ErrorKind::kConfig, "adapter dim must be >= 1");
  if (has_attention(s.kind)) {
    require(s.heads >= 1, ErrorKind::kConfig, "adapter heads must be >= 1");
    require(s.dim % s.heads == 0, ErrorKind::kConfig,
            "adapter dim " + std::to_string(s.dim) + " is not divisible by heads " +
                std::to_string(s.heads));
  }
  if (s.kind == AdapterKind::kInCA)
    require(s.queries >= 1, ErrorKind::kConfig, "InCA needs at least one query");
  if (s.kind == AdapterKind::kOpenInCA)
    require(s.classes >= 0, ErrorKind::kConfig, "class count must be >= 0");
  else
    require(s.classes >= 1, ErrorKind::kConfig, "class count must be >= 1");
  if (s.kind == AdapterKind::kMlp3 && s.hidden)
    require(*s.hidden >= 1, ErrorKind::kConfig, "MLP-3 hidden width must be >= 1");
}

template <typename T>
Var map_leaf(Graph<T>& g, const Tensor& z) {
  if constexpr (std::is_same_v<T, float>)
    return g.constant(z);
  else
    return g.constant(tensor_cast<T>(z));
}

}  // namespace

const char* adapter_kind_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kInCA: return "inca";
    case AdapterKind::kOpenInCA: return "open-inca";
    case AdapterKind::kLinearProbe: return "lp";
    case AdapterKind::kMlp3: return "mlp3";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "inca") return AdapterKind::kInCA;
  if (name == "open-inca") return AdapterKind::kOpenInCA;
  if (name == "lp") return AdapterKind::kLinearProbe;
  if (name == "mlp3") return AdapterKind::kMlp3;
  fail(ErrorKind::kConfig, "unknown adapter type '" + name + "' (inca|open-inca|lp|mlp3)");
}

std::vector<NamedTensor> named_tensors(Adapter& a) {
  std::vector<NamedTensor> out;
  if (has_attention(a.spec.kind)) {
    out.push_back({"attn.queries", &a.attn.queries, true});
    out.push_back({"attn.w_q", &a.attn.w_q, false});
    out.push_back({"attn.w_k", &a.attn.w_k, false});
    out.push_back({"attn.w_v", &a.attn.w_v, false});
    out.push_back({"attn.w_o", &a.attn.w_o, false});
  }
  if (a.spec.kind == AdapterKind::kMlp3) {
    out.push_back({"mlp.w1", &a.mlp.w1, false});
    out.push_back({"mlp.b1", &a.mlp.b1, false});
    out.push_back({"mlp.w2", &a.mlp.w2, false});
    out.push_back({"mlp.b2", &a.mlp.b2, false});
    out.push_back({"mlp.w3", &a.mlp.w3, true});
    out.push_back({"mlp.b3", &a.mlp.b3, true});
  } else {
    out.push_back({"head.gamma", &a.head.gamma, false});
    out.push_back({"head.beta", &a.head.beta, false});
    out.push_back({"head.weight", &a.head.weight, true});
    out.push_back({"head.bias", &a.head.bias, true});
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> list_tensors(const Adapter& a) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& nt : named_tensors(const_cast<Adapter&>(a))) out.emplace_back(nt.name, nt.tensor);
  return out;
}

bool is_trainable(const NamedTensor& t, TrainMode mode) {
  return mode == TrainMode::kFull || t.query_only_trainable;
}

std::size_t parameter_count(const Adapter& a) {
  std::size_t n = 0;
  for (const auto& [name, t] : list_tensors(a)) n += t->size();
  return n;
}

std::size_t trainable_count(const Adapter& a, TrainMode mode) {
  std::size_t n = 0;
  for (const auto& nt : named_tensors(const_cast<Adapter&>(a)))
    if (is_trainable(nt, mode)) n += nt.tensor->size();
  return n;
}

ClassParams init_class(std::size_t dim, int class_id, std::uint64_t seed) {
  ClassParams c;
  c.class_id = class_id;
  c.query = normal_tensor({1, dim}, derive_seed(seed, {0xc1a55, static_cast<std::uint64_t>(class_id)}),
                          kInitStd);
  c.weight = Tensor({1, dim});
  return c;
}

Adapter init_adapter(const AdapterSpec& spec, std::uint64_t seed) {
  validate(spec);
  Adapter a;
  a.spec = spec;
  a.seed = seed;
  const std::size_t d = spec.dim;
  const auto c = static_cast<std::size_t>(std::max(spec.classes, 0));

  if (has_attention(spec.kind)) {
    a.attn.heads = spec.heads;
    a.attn.w_q = normal_tensor({d, d}, derive_seed(seed, {0xa77, 1}), kInitStd);
    a.attn.w_k = normal_tensor({d, d}, derive_seed(seed, {0xa77, 2}), kInitStd);
    a.attn.w_v = normal_tensor({d, d}, derive_seed(seed, {0xa77, 3}), kInitStd);
    a.attn.w_o = normal_tensor({d, d}, derive_seed(seed, {0xa77, 4}), kInitStd);
  }
  if (spec.kind == AdapterKind::kInCA)
    a.attn.queries = normal_tensor({spec.queries, d}, derive_seed(seed, {0xa77, 5}), kInitStd);

  if (spec.kind == AdapterKind::kOpenInCA) {
    a.spec.queries = c;
    a.attn.queries = Tensor({c, d});
    for (std::size_t i = 0; i < c; ++i) {
      const auto cp = init_class(d, static_cast<int>(i), seed);
      std::copy(cp.query.data().begin(), cp.query.data().end(), a.attn.queries.row_span(i).begin());
      a.class_ids.push_back(static_cast<int>(i));
    }
  }

  if (spec.kind == AdapterKind::kMlp3) {
    const std::size_t h = spec.hidden.value_or(d);
    a.mlp.w1 = normal_tensor({h, d}, derive_seed(seed, {0x31, 1}), 1.0 / std::sqrt(double(d)));
    a.mlp.b1 = Tensor({1, h});
    a.mlp.w2 = normal_tensor({h, h}, derive_seed(seed, {0x31, 2}), 1.0 / std::sqrt(double(h)));
    a.mlp.b2 = Tensor({1, h});
    a.mlp.w3 = Tensor({c, h});
    a.mlp.b3 = Tensor({1, c});
  } else {
    a.head.gamma = Tensor::filled({1, d}, 1.0f);
    a.head.beta = Tensor({1, d});
    a.head.weight = Tensor({c, d});
    a.head.bias = Tensor({1, c});
  }
  return a;
}

std::uint64_t trunk_checksum(const Adapter& a) {
  std::uint64_t h = io::fnv1a(&a.attn.heads, sizeof a.attn.heads);
  for (const Tensor* t : {&a.attn.w_q, &a.attn.w_k, &a.attn.w_v, &a.attn.w_o, &a.head.gamma, &a.head.beta})
    h = fingerprint(*t, h);
  return h;
}

// ---------------------------------------------------------------------------

template <typename T>
std::vector<Var> bind(Graph<T>& g, const Adapter& a, TrainMode mode, bool trainable) {
  std::vector<Var> vars;
  for (const auto& nt : named_tensors(const_cast<Adapter&>(a))) {
    const bool train = trainable && is_trainable(nt, mode);
    if constexpr (std::is_same_v<T, float>)
      vars.push_back(g.leaf(*nt.tensor, train));
    else
      vars.push_back(train ? g.param(tensor_cast<T>(*nt.tensor))
                           : g.constant(tensor_cast<T>(*nt.tensor)));
  }
  return vars;
}

template <typename T>
Var cross_attention(Graph<T>& g, std::size_t heads, Var w_q, Var w_k, Var w_v, Var w_o,
                    Var queries, std::span<const Var> maps) {
  const std::size_t d = g.value(w_q).rows();
  const std::size_t m = g.value(queries).rows();
  require(heads >= 1 && d % heads == 0, ErrorKind::kDimension,
          "cross_attention: d=" + std::to_string(d) + " not divisible by h=" + std::to_string(heads));
  require(!maps.empty(), ErrorKind::kDimension, "cross_attention: empty batch");
  const std::size_t dh = d / heads;
  const T score_scale = T(1) / std::sqrt(T(dh));

  // Fold W_q and W_k into one score vector per (head, query): scores are then
  // qstar * z, which costs d*T per row instead of d*d*T.
  const Var qp = g.matmul_nt(queries, w_q);
  std::vector<Var> qstar_parts;
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = heads == 1 ? qp : g.slice_cols(qp, h * dh, (h + 1) * dh);
    const Var kh = heads == 1 ? w_k : g.slice_rows(w_k, h * dh, (h + 1) * dh);
    qstar_parts.push_back(g.scale(g.matmul(qh, kh), score_scale));
  }
  const Var qstar = heads == 1 ? qstar_parts[0] : g.concat_rows(qstar_parts);

  std::vector<Var> pooled;  // per sample, (h*m) x d
  pooled.reserve(maps.size());
  for (Var z : maps) {
    const Var s = g.softmax_rows(g.matmul(qstar, z));
    pooled.push_back(g.matmul_nt(s, z));
  }

  std::vector<Var> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<Var> rows;
    rows.reserve(maps.size());
    for (Var p : pooled) rows.push_back(heads == 1 ? p : g.slice_rows(p, h * m, (h + 1) * m));
    const Var ph = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
    const Var vh = heads == 1 ? w_v : g.slice_rows(w_v, h * dh, (h + 1) * dh);
    head_out.push_back(g.matmul_nt(ph, vh));
  }
  const Var o = heads == 1 ? head_out[0] : g.concat_cols(head_out);
  return g.matmul_nt(o, w_o);
}

template <typename T>
Var adapter_logits(Graph<T>& g, const Adapter& a, const std::vector<Var>& v,
                   std::span<const Tensor* const> maps) {
  require(!maps.empty(), ErrorKind::kDimension, "adapter_logits: empty batch");
  const std::size_t d = a.spec.dim;
  std::vector<Var> zs;
  zs.reserve(maps.size());
  for (const Tensor* z : maps) {
    require(z->rows() == d, ErrorKind::kDimension,
            "adapter expects d=" + std::to_string(d) + " maps, got " + shape_str(z->shape()));
    zs.push_back(map_leaf(g, *z));
  }

  auto pool_tokens = [&] {
    std::vector<Var> rows;
    rows.reserve(zs.size());
    for (Var z : zs) rows.push_back(g.mean_rows(g.transpose(z)));
    return rows.size() == 1 ? rows[0] : g.concat_rows(rows);
  };

  switch (a.spec.kind) {
    case AdapterKind::kInCA: {
      const Var out = cross_attention(g, a.attn.heads, v[1], v[2], v[3], v[4], v[0], zs);
      const std::size_t m = a.attn.queries.rows();
      Var pooled = out;
      if (m > 1) {
        std::vector<Var> rows;
        for (std::size_t s = 0; s < zs.size(); ++s)
          rows.push_back(g.mean_rows(g.slice_rows(out, s * m, (s + 1) * m)));
        pooled = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
      }
      const Var normed = g.layer_norm(pooled, v[5], v[6]);
      return g.add_row(g.matmul_nt(normed, v[7]), v[8]);
    }
    case AdapterKind::kOpenInCA: {
      const std::size_t c = a.attn.queries.rows();
      require(c >= 1, ErrorKind::kDimension, "Open-InCA adapter has no classes");
      const Var out = cross_attention(g, a.attn.heads, v[1], v[2], v[3], v[4], v[0], zs);
      const Var normed = g.layer_norm(out, v[5], v[6]);
      std::vector<Var> rows;
      rows.reserve(zs.size());
      for (std::size_t s = 0; s < zs.size(); ++s) {
        const Var block = zs.size() == 1 ? normed : g.slice_rows(normed, s * c, (s + 1) * c);
        rows.push_back(g.row_dot(block, v[7]));
      }
      const Var logit = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
      return g.add_row(logit, v[8]);
    }
    case AdapterKind::kLinearProbe: {
      const Var normed = g.layer_norm(pool_tokens(), v[0], v[1]);
      return g.add_row(g.matmul_nt(normed, v[2]), v[3]);
    }
    case AdapterKind::kMlp3: {
      const Var h1 = g.gelu(g.add_row(g.matmul_nt(pool_tokens(), v[0]), v[1]));
      const Var h2 = g.gelu(g.add_row(g.matmul_nt(h1, v[2]), v[3]));
      return g.add_row(g.matmul_nt(h2, v[4]), v[5]);
    }
  }
  fail(ErrorKind::kContract, "unknown adapter kind");
}

template std::vector<Var> bind(Graph<float>&, const Adapter&, TrainMode, bool);
template std::vector<Var> bind(Graph<double>&, const Adapter&, TrainMode, bool);
template Var adapter_logits(Graph<float>&, const Adapter&, const std::vector<Var>&,
                            std::span<const Tensor* const>);
template Var adapter_logits(Graph<double>&, const Adapter&, const std::vector<Var>&,
                            std::span<const Tensor* const>);
template Var cross_attention(Graph<float>&, std::size_t, Var, Var, Var, Var, Var, std::span<const Var>);
template Var cross_attention(Graph<double>&, std::size_t, Var, Var, Var, Var, Var, std::span<const Var>);

// ---------------------------------------------------------------------------

Tensor cross_attention(const Tensor& z, const CrossAttnParams& p, const Tensor& queries) {
  Graph<float> g;
  const Var zv = g.constant(z);
  const Var out = cross_attention(g, p.heads, g.constant(p.w_q), g.constant(p.w_k), g.constant(p.w_v),
                                  g.constant(p.w_o), g.constant(queries), std::span<const Var>(&zv, 1));
  return g.value(out);
}

Tensor batch_logits(const Adapter& a, std::span<const Tensor* const> maps) {
  Graph<float> g;
  const auto v = bind(g, a, TrainMode::kFull, false);
  return g.value(adapter_logits(g, a, v, maps));
}

Tensor logits(const Tensor& z, const Adapter& a) {
  const Tensor* one[] = {&z};
  return batch_logits(a, one);
}

namespace {
Tensor forward_as(const Tensor& z, const Adapter& a, AdapterKind kind) {
  require(a.spec.kind == kind, ErrorKind::kContract,
          std::string("adapter is '") + adapter_kind_name(a.spec.kind) + "', not '" +
              adapter_kind_name(kind) + "'");
  return logits(z, a);
}
}  // namespace

Tensor inca_forward(const Tensor& z, const Adapter& a) { return forward_as(z, a, AdapterKind::kInCA); }
Tensor open_inca_forward(const Tensor& z, const Adapter& a) {
  return forward_as(z, a, AdapterKind::kOpenInCA);
}
Tensor linear_probe_forward(const Tensor& z, const Adapter& a) {
  return forward_as(z, a, AdapterKind::kLinearProbe);
}
Tensor mlp3_forward(const Tensor& z, const Adapter& a) { return forward_as(z, a, AdapterKind::kMlp3); }

template <typename T>
BasicTensor<T> diag_head(const BasicTensor<T>& a, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  const std::size_t d = a.rows(), c = a.cols();
  require(w.rows() == c && w.cols() == d && bias.size() == c, ErrorKind::kDimension,
          "diag_head: A " + shape_str(a.shape()) + ", W " + shape_str(w.shape()) + ", bias " +
              shape_str(bias.shape()));
  BasicTensor<T> out({1, c});
  for (std::size_t i = 0; i < c; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < d; ++k) acc += w(i, k) * a(k, i);
    out[i] = acc + bias[i];
  }
  return out;
}

template Tensor diag_head(const Tensor&, const Tensor&, const Tensor&);
template Tensor64 diag_head(const Tensor64&, const Tensor64&, const Tensor64&);

// ---------------------------------------------------------------------------

template <typename T>
CollapsedParams<T> collapse_query(const BasicTensor<T>& w_q, const BasicTensor<T>& w_k,
                                  const BasicTensor<T>& q, const BasicTensor<T>& w_v,
                                  double score_scale) {
  const auto qrow = q.reshaped({1, q.size()});
  require(w_q.cols() == q.size() && w_k.rows() == w_q.rows(), ErrorKind::kDimension,
          "collapse_query: W_q " + shape_str(w_q.shape()) + ", W_k " + shape_str(w_k.shape()) +
              ", q " + shape_str(q.shape()));
  CollapsedParams<T> cp;
  cp.q_star = matmul(matmul(qrow, transposed(w_q)), w_k);
  if (score_scale != 1.0)
    for (auto& x : cp.q_star.data()) x *= static_cast<T>(score_scale);
  cp.w_v = w_v;
  return cp;
}

template <typename T>
BasicTensor<T> collapse_weights(const BasicTensor<T>& z, const BasicTensor<T>& q_star) {
  require(q_star.size() == z.rows(), ErrorKind::kDimension,
          "collapse: q* has " + std::to_string(q_star.size()) + " entries, tokens have " +
              std::to_string(z.rows()));
  auto s = matmul(q_star.reshaped({1, q_star.size()}), z);
  T mx = s[0];
  for (T v : s.data()) mx = std::max(mx, v);
  T total = 0;
  for (auto& v : s.data()) total += (v = std::exp(v - mx));
  for (auto& v : s.data()) v /= total;
  return s;
}

template <typename T>
BasicTensor<T> collapse_apply(const BasicTensor<T>& z, const CollapsedParams<T>& cp) {
  require(cp.w_v.cols() == z.rows(), ErrorKind::kDimension,
          "collapse_apply: W_v " + shape_str(cp.w_v.shape()) + " vs tokens " + shape_str(z.shape()));
  const auto s = collapse_weights(z, cp.q_star);
  const auto agg = matmul(s, transposed(z));  // 1 x d
  return matmul(agg, transposed(cp.w_v));
}

template CollapsedParams<float> collapse_query(const Tensor&, const Tensor&, const Tensor&, const Tensor&, double);
template CollapsedParams<double> collapse_query(const Tensor64&, const Tensor64&, const Tensor64&,
                                                const Tensor64&, double);
template Tensor collapse_weights(const Tensor&, const Tensor&);
template Tensor64 collapse_weights(const Tensor64&, const Tensor64&);
template Tensor collapse_apply(const Tensor&, const CollapsedParams<float>&);
template Tensor64 collapse_apply(const Tensor64&, const CollapsedParams<double>&);

// ---------------------------------------------------------------------------

std::string serialize_adapter(const Adapter& a) {
  nlohmann::json h;
  h["kind"] = adapter_kind_name(a.spec.kind);
  h["dim"] = a.spec.dim;
  h["heads"] = a.spec.heads;
  h["queries"] = a.spec.queries;
  h["classes"] = a.spec.classes;
  if (a.spec.hidden) h["hidden"] = *a.spec.hidden;
  h["seed"] = io::hex64(a.seed);
  h["class_ids"] = a.class_ids;
  h["dtype"] = "f32";
  auto& list = h["tensors"];
  list = nlohmann::json::array();
  for (const auto& [name, t] : list_tensors(a)) list.push_back({{"name", name}, {"shape", t->shape()}});
  const std::string header = h.dump();

  std::string out(kAdapterMagic, 8);
  io::put<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& [name, t] : list_tensors(a))
    out.append(reinterpret_cast<const char*>(t->ptr()), t->size() * sizeof(float));
  return out;
}

Adapter deserialize_adapter(const std::string& bytes) {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kAdapterMagic, 8) == 0, ErrorKind::kFormat,
          "not an adapter checkpoint (bad magic at byte offset 0)");
  const auto hlen = io::get<std::uint64_t>(bytes.data() + 8);
  require(16 + hlen <= bytes.size(), ErrorKind::kFormat,
          "adapter checkpoint header truncated at byte offset " + std::to_string(bytes.size()));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed adapter header: ") + e.what());
  }
  Adapter a;
  try {
    a.spec.kind = parse_adapter_kind(h.at("kind").get<std::string>());
    a.spec.dim = h.at("dim").get<std::size_t>();
    a.spec.heads = h.at("heads").get<std::size_t>();
    a.spec.queries = h.at("queries").get<std::size_t>();
    a.spec.classes = h.at("classes").get<int>();
    if (h.contains("hidden")) a.spec.hidden = h.at("hidden").get<std::size_t>();
    a.seed = std::stoull(h.at("seed").get<std::string>(), nullptr, 16);
    a.class_ids = h.at("class_ids").get<std::vector<int>>();
    a.attn.heads = a.spec.heads;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed adapter header: ") + e.what());
  }
  const auto& list = h.at("tensors");
  auto slots = named_tensors(a);
  require(list.size() == slots.size(), ErrorKind::kFormat,
          "adapter header lists " + std::to_string(list.size()) + " tensors, expected " +
              std::to_string(slots.size()));
  std::size_t off = 16 + hlen;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto name = list[i].at("name").get<std::string>();
    require(name == slots[i].name, ErrorKind::kFormat,
            "adapter tensor " + std::to_string(i) + " is '" + name + "', expected '" + slots[i].name + "'");
    Tensor t(list[i].at("shape").get<Shape>());
    const std::size_t n = t.size() * sizeof(float);
    require(off + n <= bytes.size(), ErrorKind::kFormat,
            "adapter payload truncated in '" + name + "' at byte offset " + std::to_string(off));
    if (n) std::memcpy(t.ptr(), bytes.data() + off, n);
    off += n;
    *slots[i].tensor = std::move(t);
  }
  require(off == bytes.size(), ErrorKind::kFormat,
          "trailing bytes after adapter payload at byte offset " + std::to_string(off));
  return a;
}

void save_adapter(const Adapter& a, const std::string& path) {
  const auto bytes = serialize_adapter(a);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorKind::kIo, "cannot create " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(bool(out), ErrorKind::kIo, "write failed for " + path);
}

Adapter load_adapter(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_adapter(ss.str());
}

}  // namespace inca
