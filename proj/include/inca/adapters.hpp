#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "inca/graph.hpp"
#include "inca/tensor.hpp"

namespace inca {

enum class AdapterKind { kInCA, kOpenInCA, kLinearProbe, kMlp3 };

const char* adapter_kind_name(AdapterKind kind);
AdapterKind parse_adapter_kind(const std::string& name);

struct AdapterSpec {
  AdapterKind kind = AdapterKind::kInCA;
  std::size_t dim = 0;
  std::size_t heads = 4;
  std::size_t queries = 1;  // m for InCA; Open-InCA uses one query per class
  int classes = 0;
  std::optional<std::size_t> hidden;  // MLP-3 width; unset means d
};

// Multi-head cross-attention with learned queries. Scores use 1/sqrt(d_h),
// heads are concatenated and passed through w_o. No projection biases.
struct CrossAttnParams {
  std::size_t heads = 1;
  Tensor w_q, w_k, w_v, w_o;  // d x d
  Tensor queries;             // m x d (Open-InCA: c x d)

  std::size_t dim() const noexcept { return w_q.rows(); }
  std::size_t head_dim() const noexcept { return dim() / heads; }
};

// Norm and affine head. For Open-InCA `weight` is the c x d diag-head and
// gamma/beta are the shared trunk norm.
struct InCAHead {
  Tensor gamma, beta;  // 1 x d
  Tensor weight;       // C x d
  Tensor bias;         // 1 x C
};

struct MlpParams {
  Tensor w1, b1, w2, b2, w3, b3;  // weights are out x in, biases 1 x out
};

// Trainable state of one adapter. Which members are populated depends on
// spec.kind.
struct Adapter {
  AdapterSpec spec;
  CrossAttnParams attn;  // InCA, Open-InCA
  InCAHead head;         // InCA, Open-InCA, LP
  MlpParams mlp;         // MLP-3
  std::vector<int> class_ids;  // Open-InCA: label carried by each column
  std::uint64_t seed = 0;

  int classes() const noexcept { return spec.classes; }
};

using OpenInCAParams = Adapter;

// Which tensors an optimizer may touch.
enum class TrainMode { kFull, kQueryOnly };

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  bool query_only_trainable;  // per-class queries and head rows
};

// Fixed enumeration order used by optimizers, checkpoints and binding.
std::vector<NamedTensor> named_tensors(Adapter& a);
std::vector<std::pair<std::string, const Tensor*>> list_tensors(const Adapter& a);
bool is_trainable(const NamedTensor& t, TrainMode mode);

std::size_t parameter_count(const Adapter& a);
std::size_t trainable_count(const Adapter& a, TrainMode mode);

// Projections and queries ~ N(0, 0.02^2), norm gamma 1 / beta 0, head zero.
// MLP-3 hidden layers use N(0, 1/fan_in). Open-InCA class rows are seeded by
// class id, so a class's initial parameters do not depend on which other
// classes exist.
Adapter init_adapter(const AdapterSpec& spec, std::uint64_t seed);

// Initial (query, head row, bias) of one Open-InCA class.
struct ClassParams {
  int class_id = 0;
  Tensor query;   // 1 x d
  Tensor weight;  // 1 x d
  float bias = 0.0f;
};
ClassParams init_class(std::size_t dim, int class_id, std::uint64_t seed);

// Fingerprint of the Open-InCA trunk (projections, heads, shared norm).
std::uint64_t trunk_checksum(const Adapter& a);

// ---------------------------------------------------------------------------
// Graph construction

// Vars for every tensor of `a`, in named_tensors order. Tensors outside
// `mode` (or all of them when `trainable` is false) become constants.
template <typename T>
std::vector<Var> bind(Graph<T>& g, const Adapter& a, TrainMode mode, bool trainable = true);

// Logits for a batch of d x T maps, one row per map.
template <typename T>
Var adapter_logits(Graph<T>& g, const Adapter& a, const std::vector<Var>& bound,
                   std::span<const Tensor* const> maps);

// Cross-attention of one bound query block against every map. Returns the
// (B*m) x d stack of outputs, sample-major.
template <typename T>
Var cross_attention(Graph<T>& g, std::size_t heads, Var w_q, Var w_k, Var w_v, Var w_o,
                    Var queries, std::span<const Var> maps);

// ---------------------------------------------------------------------------
// Convenience forwards for a single map (no gradients)

Tensor cross_attention(const Tensor& z, const CrossAttnParams& params, const Tensor& queries);
Tensor inca_forward(const Tensor& z, const Adapter& a);
Tensor open_inca_forward(const Tensor& z, const Adapter& a);
Tensor linear_probe_forward(const Tensor& z, const Adapter& a);
Tensor mlp3_forward(const Tensor& z, const Adapter& a);
Tensor logits(const Tensor& z, const Adapter& a);
// Rows of the batch logits.
Tensor batch_logits(const Adapter& a, std::span<const Tensor* const> maps);

// output_i = <W_i, A[:, i]> + bias_i
template <typename T>
BasicTensor<T> diag_head(const BasicTensor<T>& a, const BasicTensor<T>& w, const BasicTensor<T>& bias);

// ---------------------------------------------------------------------------
// Query collapse

template <typename T>
struct CollapsedParams {
  BasicTensor<T> q_star;  // 1 x d
  BasicTensor<T> w_v;     // k x d
};

// q* = score_scale * q^T W_q^T W_k. A single-head attention layer's own
// score scale is 1/sqrt(d); pass it to fold the scale into q*.
template <typename T>
CollapsedParams<T> collapse_query(const BasicTensor<T>& w_q, const BasicTensor<T>& w_k,
                                  const BasicTensor<T>& q, const BasicTensor<T>& w_v,
                                  double score_scale = 1.0);

// sum_j softmax_j(<q*, z^j>) W_v z^j, as a 1 x k row.
template <typename T>
BasicTensor<T> collapse_apply(const BasicTensor<T>& z, const CollapsedParams<T>& cp);

// Softmax weights over the T tokens of z for score vector q*.
template <typename T>
BasicTensor<T> collapse_weights(const BasicTensor<T>& z, const BasicTensor<T>& q_star);

// ---------------------------------------------------------------------------
// Checkpoints: "INCADPT1", u64 header length, JSON header, f32 payload in
// named_tensors order (little-endian).

void save_adapter(const Adapter& a, const std::string& path);
Adapter load_adapter(const std::string& path);
std::string serialize_adapter(const Adapter& a);
Adapter deserialize_adapter(const std::string& bytes);

extern template std::vector<Var> bind(Graph<float>&, const Adapter&, TrainMode, bool);
extern template std::vector<Var> bind(Graph<double>&, const Adapter&, TrainMode, bool);
extern template Var adapter_logits(Graph<float>&, const Adapter&, const std::vector<Var>&,
                                   std::span<const Tensor* const>);
extern template Var adapter_logits(Graph<double>&, const Adapter&, const std::vector<Var>&,
                                   std::span<const Tensor* const>);

}  // namespace inca
