#pragma once

// Decoder-only causal transformer with RMSNorm pre-normalization, rotary
// position embeddings, optional low-rank adapters on the query/key/value
// projections and a Student-t distribution head.
//
// Weights are stored [out, in]; a linear layer computes x · Wᵀ.
//
// Parameter count (no adapters), with t = token_dim, d = d_model, f = ffn_dim,
// L = n_layers:
//
//   t·d + L·(4·d² + 2·d·f + 2·d) + d + (3·d + 3)
//
// input projection, per-layer attention + feed-forward + two norm gains,
// final norm gain, head weights + bias. Each adapter adds r·(d + d).

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "strada/autograd.hpp"
#include "strada/rng.hpp"

namespace strada {

struct ModelConfig {
  std::size_t token_dim = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::size_t context_length = 16;
  double rope_base = 10000.0;
  double rmsnorm_eps = 1e-5;
  // Adds 2 to ν so the predictive distribution always has a finite variance.
  bool finite_variance = false;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void ModelConfig::validate() const {
  if (token_dim == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || head_dim == 0 ||
      ffn_dim == 0 || context_length == 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (d_model != n_heads * head_dim) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                      ") must equal n_heads * head_dim (" + std::to_string(n_heads) + " * " +
                      std::to_string(head_dim) + ")");
  }
  if (head_dim % 2 != 0) throw ConfigError("model config: head_dim must be even for rotary encoding");
  if (!(rope_base > 0.0) || !(rmsnorm_eps >= 0.0)) {
    throw ConfigError("model config: rope_base must be positive and rmsnorm_eps nonnegative");
  }
}

enum class Projection : std::size_t { query = 0, key = 1, value = 2 };
inline constexpr std::array<const char*, 3> kProjectionNames = {"wq", "wk", "wv"};

// ΔW = B·A with A: rank × in, B: out × rank.
template <typename T>
struct LoraAdapter {
  Tensor<T> a;
  Tensor<T> b;
  std::size_t rank() const { return a.dim(0); }
};

template <typename T>
struct LayerParams {
  Tensor<T> attn_norm;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> ffn_norm;
  Tensor<T> w_up, w_down;
  std::array<std::optional<LoraAdapter<T>>, 3> lora;

  Tensor<T>& projection(Projection p) {
    return p == Projection::query ? wq : (p == Projection::key ? wk : wv);
  }
  const Tensor<T>& projection(Projection p) const {
    return p == Projection::query ? wq : (p == Projection::key ? wk : wv);
  }
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> input_proj;
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> head_w;
  Tensor<T> head_b;
  // Multiplier on the adapter path: x·Wᵀ + lora_scale·(x·Aᵀ)·Bᵀ.
  T lora_scale = T{1};

  bool has_lora() const {
    for (const auto& l : layers) {
      for (const auto& a : l.lora) {
        if (a) return true;
      }
    }
    return false;
  }

  template <typename U>
  ModelParams<U> cast() const;
};

enum class ParamRole { weight, gain, bias, adapter };

namespace param_names {
inline std::string layer(std::size_t i, const std::string& leaf) {
  return "layers." + std::to_string(i) + "." + leaf;
}
inline constexpr const char* kInput = "input.weight";
inline constexpr const char* kFinalNorm = "final_norm";
inline constexpr const char* kHeadWeight = "head.weight";
inline constexpr const char* kHeadBias = "head.bias";
}  // namespace param_names

// Visits every tensor in a fixed order: fn(name, tensor, role). Works on
// const and mutable params alike.
template <typename Params, typename Fn>
void for_each_param(Params& p, Fn&& fn) {
  fn(std::string(param_names::kInput), p.input_proj, ParamRole::weight);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    fn(param_names::layer(i, "attn_norm"), l.attn_norm, ParamRole::gain);
    fn(param_names::layer(i, "wq"), l.wq, ParamRole::weight);
    fn(param_names::layer(i, "wk"), l.wk, ParamRole::weight);
    fn(param_names::layer(i, "wv"), l.wv, ParamRole::weight);
    fn(param_names::layer(i, "wo"), l.wo, ParamRole::weight);
    fn(param_names::layer(i, "ffn_norm"), l.ffn_norm, ParamRole::gain);
    fn(param_names::layer(i, "w_up"), l.w_up, ParamRole::weight);
    fn(param_names::layer(i, "w_down"), l.w_down, ParamRole::weight);
    for (std::size_t k = 0; k < 3; ++k) {
      if (l.lora[k]) {
        const std::string base = param_names::layer(i, kProjectionNames[k]);
        fn(base + ".lora_a", l.lora[k]->a, ParamRole::adapter);
        fn(base + ".lora_b", l.lora[k]->b, ParamRole::adapter);
      }
    }
  }
  fn(std::string(param_names::kFinalNorm), p.final_norm, ParamRole::gain);
  fn(std::string(param_names::kHeadWeight), p.head_w, ParamRole::weight);
  fn(std::string(param_names::kHeadBias), p.head_b, ParamRole::bias);
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.config = config;
  out.lora_scale = static_cast<U>(lora_scale);
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (layers[i].lora[k]) out.layers[i].lora[k].emplace();
    }
  }
  std::vector<const Tensor<T>*> src;
  for_each_param(*this, [&](const std::string&, const Tensor<T>& t, ParamRole) { src.push_back(&t); });
  std::size_t idx = 0;
  for_each_param(out, [&](const std::string&, Tensor<U>& t, ParamRole) {
    t = src[idx++]->template cast<U>();
  });
  return out;
}

// Closed-form parameter count of a model without adapters.
inline std::size_t parameter_count_formula(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return c.token_dim * d + c.n_layers * (4 * d * d + 2 * d * c.ffn_dim + 2 * d) + d + 3 * d + 3;
}

inline std::size_t head_parameter_count(const ModelConfig& c) { return 3 * c.d_model + 3; }

// Closed-form adapter count: one adapter on each of q, k, v per layer.
inline std::size_t lora_parameter_count_formula(const ModelConfig& c, std::size_t rank) {
  return c.n_layers * 3 * rank * (c.d_model + c.d_model);
}

// Counts scalars, optionally restricted to names accepted by `filter`.
template <typename T>
std::size_t count_parameters(const ModelParams<T>& p,
                             const std::function<bool(const std::string&)>& filter = {}) {
  std::size_t n = 0;
  for_each_param(p, [&](const std::string& name, const Tensor<T>& t, ParamRole) {
    if (!filter || filter(name)) n += t.size();
  });
  return n;
}

// Truncated normal (±2σ, σ = 0.02) weights, unit gains, zero head bias.
template <typename T>
ModelParams<T> init_model(const ModelConfig& config, RngStream& stream) {
  config.validate();
  const std::size_t d = config.d_model;
  auto weights = [&](std::size_t out, std::size_t in) {
    Tensor<T> w({out, in});
    for (auto& x : w.data()) x = static_cast<T>(0.02 * stream.truncated_normal(2.0));
    return w;
  };
  ModelParams<T> p;
  p.config = config;
  p.input_proj = weights(d, config.token_dim);
  p.layers.resize(config.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm = Tensor<T>({d}, T{1});
    l.wq = weights(d, d);
    l.wk = weights(d, d);
    l.wv = weights(d, d);
    l.wo = weights(d, d);
    l.ffn_norm = Tensor<T>({d}, T{1});
    l.w_up = weights(config.ffn_dim, d);
    l.w_down = weights(d, config.ffn_dim);
  }
  p.final_norm = Tensor<T>({d}, T{1});
  p.head_w = weights(3, d);
  p.head_b = Tensor<T>({3});
  return p;
}

struct StudentTParams {
  double nu = 1.0;
  double mu = 0.0;
  double sigma = 1.0;
};

template <typename T>
ag::StudentTHead<T> head_transform(const ModelConfig& c) {
  ag::StudentTHead<T> h;
  h.nu_floor = static_cast<T>(c.finite_variance ? 2.0 + 1e-3 : 1e-3);
  return h;
}

template <typename T>
StudentTParams to_student_t(const ag::StudentTHead<T>& head, T raw_nu, T raw_mu, T raw_sigma) {
  return {static_cast<double>(head.nu(raw_nu)), static_cast<double>(head.mu(raw_mu)),
          static_cast<double>(head.sigma(raw_sigma))};
}

// −log pdf of the location-scale Student-t at y.
inline double student_t_nll(const StudentTParams& p, double y) {
  if (!std::isfinite(y)) throw InputError("student_t_nll: target is not finite");
  return ag::student_t_nll_value(p.nu, p.mu, p.sigma, y);
}

// μ + σ·Z/√(V/ν) with Z ~ N(0,1), V ~ χ²(ν).
inline double sample_student_t(const StudentTParams& p, RngStream& stream) {
  const double z = stream.normal();
  const double v = stream.chi_square(p.nu);
  return p.mu + p.sigma * z / std::sqrt(v / p.nu);
}

// Model parameters bound onto a tape.
template <typename T>
struct LayerVars {
  Var<T> attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down;
  std::array<std::optional<std::pair<Var<T>, Var<T>>>, 3> lora;
};

template <typename T>
struct ModelVars {
  Var<T> input_proj;
  std::vector<LayerVars<T>> layers;
  Var<T> final_norm, head_w, head_b;
  std::vector<std::pair<std::string, Var<T>>> named;
};

// Groups Vars given in for_each_param order into the model structure.
template <typename T>
ModelVars<T> assemble_vars(const ModelParams<T>& p, std::span<const Var<T>> flat) {
  ModelVars<T> m;
  std::map<std::string, Var<T>> by_name;
  std::size_t idx = 0;
  for_each_param(p, [&](const std::string& name, const Tensor<T>&, ParamRole) {
    if (idx >= flat.size()) throw InputError("assemble_vars: too few variables");
    by_name.emplace(name, flat[idx]);
    m.named.emplace_back(name, flat[idx]);
    ++idx;
  });
  if (idx != flat.size()) throw InputError("assemble_vars: too many variables");
  m.input_proj = by_name.at(param_names::kInput);
  m.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& lv = m.layers[i];
    lv.attn_norm = by_name.at(param_names::layer(i, "attn_norm"));
    lv.wq = by_name.at(param_names::layer(i, "wq"));
    lv.wk = by_name.at(param_names::layer(i, "wk"));
    lv.wv = by_name.at(param_names::layer(i, "wv"));
    lv.wo = by_name.at(param_names::layer(i, "wo"));
    lv.ffn_norm = by_name.at(param_names::layer(i, "ffn_norm"));
    lv.w_up = by_name.at(param_names::layer(i, "w_up"));
    lv.w_down = by_name.at(param_names::layer(i, "w_down"));
    for (std::size_t k = 0; k < 3; ++k) {
      if (p.layers[i].lora[k]) {
        const std::string base = param_names::layer(i, kProjectionNames[k]);
        lv.lora[k].emplace(by_name.at(base + ".lora_a"), by_name.at(base + ".lora_b"));
      }
    }
  }
  m.final_norm = by_name.at(param_names::kFinalNorm);
  m.head_w = by_name.at(param_names::kHeadWeight);
  m.head_b = by_name.at(param_names::kHeadBias);
  return m;
}

// Binds every parameter on `tape`; `trainable(name)` decides which ones
// receive gradients (none when empty).
template <typename T>
ModelVars<T> bind_model(Tape<T>& tape, const ModelParams<T>& p,
                        const std::function<bool(const std::string&)>& trainable = {}) {
  std::vector<Var<T>> flat;
  for_each_param(p, [&](const std::string& name, const Tensor<T>& t, ParamRole) {
    flat.push_back(tape.bind(t, trainable ? trainable(name) : false));
  });
  return assemble_vars(p, std::span<const Var<T>>(flat));
}

template <typename T>
struct ForwardVars {
  Var<T> hidden;  // final-norm output, rows × d_model
  Var<T> head;    // raw head output, rows × 3
};

namespace detail {

template <typename T>
Var<T> project(Var<T> x, Var<T> w, const std::optional<std::pair<Var<T>, Var<T>>>& lora,
               T lora_scale) {
  Var<T> base = ag::matmul_nt(x, w);
  if (!lora) return base;
  Var<T> low = ag::matmul_nt(ag::matmul_nt(x, lora->first), lora->second);
  if (lora_scale != T{1}) low = ag::scale(low, lora_scale);
  return ag::add(base, low);
}

}  // namespace detail

// Forward pass over `tokens` holding consecutive sequences of seq_len rows.
template <typename T>
ForwardVars<T> forward(const ModelParams<T>& p, const ModelVars<T>& m, Var<T> tokens,
                       std::size_t seq_len) {
  const auto& c = p.config;
  const auto& tv = tokens.value();
  if (tv.rank() != 2 || tv.dim(1) != c.token_dim) {
    throw ConfigError("forward: token width " + std::to_string(tv.rank() == 2 ? tv.dim(1) : 0) +
                      " does not match model token_dim " + std::to_string(c.token_dim));
  }
  if (seq_len == 0 || seq_len > c.context_length || tv.dim(0) % seq_len != 0) {
    throw DimensionError("forward: " + std::to_string(tv.dim(0)) +
                         " rows cannot be split into sequences of length " +
                         std::to_string(seq_len) + " (context_length " +
                         std::to_string(c.context_length) + ")");
  }
  const T eps = static_cast<T>(c.rmsnorm_eps);
  Var<T> h = ag::matmul_nt(tokens, m.input_proj);
  for (const auto& l : m.layers) {
    Var<T> a = ag::rmsnorm(h, l.attn_norm, eps);
    Var<T> q = detail::project(a, l.wq, l.lora[0], p.lora_scale);
    Var<T> k = detail::project(a, l.wk, l.lora[1], p.lora_scale);
    Var<T> v = detail::project(a, l.wv, l.lora[2], p.lora_scale);
    q = ag::rope(q, seq_len, c.head_dim, c.rope_base);
    k = ag::rope(k, seq_len, c.head_dim, c.rope_base);
    Var<T> att = ag::causal_attention(q, k, v, seq_len, c.n_heads);
    h = ag::add(h, ag::matmul_nt(att, l.wo));
    Var<T> f = ag::rmsnorm(h, l.ffn_norm, eps);
    h = ag::add(h, ag::matmul_nt(ag::silu(ag::matmul_nt(f, l.w_up)), l.w_down));
  }
  ForwardVars<T> out;
  out.hidden = ag::rmsnorm(h, m.final_norm, eps);
  out.head = ag::add_row(ag::matmul_nt(out.hidden, m.head_w), m.head_b);
  return out;
}

template <typename T>
struct ForwardOutput {
  Tensor<T> hidden;  // rows × d_model
  Tensor<T> head;    // rows × 3, raw
};

// Inference forward pass (no gradients recorded).
template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& p, const Tensor<T>& tokens, std::size_t seq_len) {
  Tape<T> tape;
  const ModelVars<T> m = bind_model(tape, p);
  const ForwardVars<T> f = forward(p, m, tape.bind(tokens, false), seq_len);
  return {f.hidden.value(), f.head.value()};
}

// Per-position forecast distributions for one sequence of tokens.
template <typename T>
std::vector<StudentTParams> forward_sequence(const ModelParams<T>& p, const Tensor<T>& tokens) {
  const ForwardOutput<T> out = forward(p, tokens, tokens.rank() == 2 ? tokens.dim(0) : 0);
  const auto head = head_transform<T>(p.config);
  std::vector<StudentTParams> result;
  result.reserve(out.head.dim(0));
  for (std::size_t r = 0; r < out.head.dim(0); ++r) {
    result.push_back(to_student_t(head, out.head(r, 0), out.head(r, 1), out.head(r, 2)));
  }
  return result;
}

// Mean Student-t NLL of next-step targets for a batch of sequences.
template <typename T>
Var<T> sequence_nll(const ModelParams<T>& p, const ModelVars<T>& m, Var<T> tokens,
                    std::span<const T> targets, std::size_t seq_len) {
  const ForwardVars<T> f = forward(p, m, tokens, seq_len);
  return ag::student_t_nll(f.head, targets, head_transform<T>(p.config));
}

// ---- Single-vector helpers -------------------------------------------------

template <typename T>
std::vector<T> rmsnorm(std::span<const T> x, std::span<const T> gain, T eps) {
  if (x.size() != gain.size() || x.empty()) {
    throw DimensionError("rmsnorm: length mismatch [" + std::to_string(x.size()) + "] vs [" +
                         std::to_string(gain.size()) + "]");
  }
  T ss = 0;
  for (T v : x) ss += v * v;
  const T inv = T{1} / std::sqrt(ss / static_cast<T>(x.size()) + eps);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
  return out;
}

// Rotates pairs (2i, 2i+1) by position·base^(−2i/d).
template <typename T>
std::vector<T> rope_rotate(std::span<const T> vec, std::size_t position, double base) {
  if (vec.empty() || vec.size() % 2 != 0) {
    throw ConfigError("rope_rotate: head_dim must be even, got " + std::to_string(vec.size()));
  }
  const std::size_t d = vec.size();
  std::vector<T> out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double angle = static_cast<double>(position) *
                         std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    out[2 * i] = vec[2 * i] * c - vec[2 * i + 1] * s;
    out[2 * i + 1] = vec[2 * i] * s + vec[2 * i + 1] * c;
  }
  return out;
}

// Causal self-attention of one layer on a single (already normalized)
// sequence, projected by W_o; no residual.
template <typename T>
Tensor<T> causal_attention(const ModelParams<T>& p, std::size_t layer, const Tensor<T>& inputs) {
  Tape<T> tape;
  const ModelVars<T> m = bind_model(tape, p);
  const auto& lv = m.layers.at(layer);
  const auto& c = p.config;
  const std::size_t seq_len = inputs.dim(0);
  Var<T> a = tape.bind(inputs, false);
  Var<T> q = ag::rope(detail::project(a, lv.wq, lv.lora[0], p.lora_scale), seq_len, c.head_dim,
                      c.rope_base);
  Var<T> k = ag::rope(detail::project(a, lv.wk, lv.lora[1], p.lora_scale), seq_len, c.head_dim,
                      c.rope_base);
  Var<T> v = detail::project(a, lv.wv, lv.lora[2], p.lora_scale);
  return ag::matmul_nt(ag::causal_attention(q, k, v, seq_len, c.n_heads), lv.wo).value();
}

}  // namespace strada
