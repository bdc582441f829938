#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "miam/autodiff.hpp"
#include "miam/data_model.hpp"

namespace miam {

/// Which input views take part in the integration attention. kTriple is the
/// full model; the others are ablations.
enum class ViewSet : std::uint8_t { kX, kXM, kXDelta, kTriple };

const char* to_string(ViewSet v);
ViewSet parse_view_set(const std::string& text);

struct ModelConfig {
  std::size_t num_variables = 0;  // D
  std::size_t d_model = 64;
  std::size_t n_heads = 8;
  std::size_t d_k = 64;  // per head
  std::size_t d_v = 64;  // per head
  std::size_t d_ffn = 128;
  std::size_t n_layers = 2;
  std::size_t d_hidden = 64;  // classifier MLP width
  double l_max = 48.0;
  double leaky_slope = 0.01;
  double ln_eps = 1e-5;
  double dropout = 0.1;
  bool residual_norm = true;
  bool use_decoder = true;
  /// When set, H^M takes the integrated missingness state into the next layer.
  bool evolve_views = false;
  ViewSet views = ViewSet::kTriple;

  /// Throws ConfigError on an unusable combination.
  void validate() const;
  bool uses_mask_view() const { return views == ViewSet::kXM || views == ViewSet::kTriple; }
  bool uses_interval_view() const {
    return views == ViewSet::kXDelta || views == ViewSet::kTriple;
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named, ordered collection of tensors (parameters or their gradients).
template <class Real>
class ParameterSet {
 public:
  void add(std::string name, ad::Tensor<Real> tensor);
  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  ad::Tensor<Real>& tensor(std::size_t i) { return tensors_.at(i); }
  const ad::Tensor<Real>& tensor(std::size_t i) const { return tensors_.at(i); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  ad::Tensor<Real>& at(const std::string& name);
  const ad::Tensor<Real>& at(const std::string& name) const;
  std::size_t element_count() const;
  /// Same names and shapes, all zeros.
  ParameterSet zeros_like() const;

  template <class To>
  ParameterSet<To> cast() const {
    ParameterSet<To> out;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& t = tensors_[i];
      std::vector<To> data(t.data().begin(), t.data().end());
      out.add(names_[i], ad::Tensor<To>(t.shape(), std::move(data)));
    }
    return out;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor<Real>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
template <class Real>
ParameterSet<Real> init_params(const ModelConfig& config, std::uint64_t seed);

/// Padded mini-batch. Per-element arrays are B x T x D row-major, per-time
/// arrays B x T; padded rows are all zero with valid = 0.
struct Batch {
  std::size_t size = 0;
  std::size_t max_len = 0;
  std::size_t num_variables = 0;
  std::vector<double> values;
  std::vector<double> mask;
  std::vector<double> intervals;
  std::vector<double> timestamps;
  std::vector<std::uint8_t> valid;
  std::vector<std::size_t> lengths;
  std::vector<int> labels;  // -1 when the sample is unlabeled
  std::vector<std::string> ids;

  std::size_t offset(std::size_t b, std::size_t j, std::size_t d) const {
    return (b * max_len + j) * num_variables + d;
  }
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Sinusoidal encoding of continuous timestamps:
/// TE[t, 2i] = sin(t / l_max^(2i/d_model)), TE[t, 2i+1] = cos(same).
RealMatrix time_embedding(std::span<const double> timestamps, std::size_t d_model,
                          double l_max);

enum class Mode : std::uint8_t { kTrain, kEval };

/// Parameters placed on a tape, addressable by name.
template <class Real>
class BoundParams {
 public:
  BoundParams(ad::Tape<Real>& tape, const ParameterSet<Real>& params, bool trainable);
  ad::Var<Real> operator()(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) > 0; }
  /// Gradients for every bound parameter, after tape.backward().
  ParameterSet<Real> gradients(const ParameterSet<Real>& like) const;

 private:
  ad::Tape<Real>* tape_;
  std::map<std::string, ad::Var<Real>> vars_;
};

/// Captured attention probability matrices, one entry per head.
template <class Real>
struct AttentionTrace {
  std::vector<std::pair<std::string, ad::Var<Real>>> weights;
};

template <class Real>
struct ForwardContext {
  ad::Tape<Real>& tape;
  const ModelConfig& config;
  const BoundParams<Real>& params;
  Mode mode = Mode::kEval;
  std::mt19937_64* dropout_rng = nullptr;
  AttentionTrace<Real>* trace = nullptr;

  bool dropout_active() const {
    return mode == Mode::kTrain && config.dropout > 0 && dropout_rng != nullptr;
  }
};

/// H^X, H^M, H^Delta as [B, T, d_model]; views absent from the ViewSet are
/// left unset.
template <class Real>
struct ViewStates {
  ad::Var<Real> hx;
  std::optional<ad::Var<Real>> hm;
  std::optional<ad::Var<Real>> hd;
};

/// Multi-head scaled dot-product attention. `prefix` names the projection
/// weights prefix.wq/.wk/.wv/.wo. `key_valid` has one flag per (batch, key).
template <class Real>
ad::Var<Real> mha(const ForwardContext<Real>& ctx, ad::Var<Real> q, ad::Var<Real> k,
                  ad::Var<Real> v, const std::string& prefix,
                  std::span<const std::uint8_t> key_valid);

/// Input embeddings plus time embedding for each view, each followed by its
/// own self-attention sublayer.
template <class Real>
ViewStates<Real> embed_views(const ForwardContext<Real>& ctx, const Batch& batch);

/// One integration layer: missingness integration (queries from H^Delta,
/// keys/values H^M), observation-missingness integration (queries from the
/// missingness state, keys/values H^X), then the position-wise FFN.
template <class Real>
ViewStates<Real> miam_layer(const ForwardContext<Real>& ctx, const ViewStates<Real>& states,
                            std::size_t layer, std::span<const std::uint8_t> key_valid);

/// Mean-pools over valid timestamps and applies the MLP; pre-sigmoid [B, 1].
template <class Real>
ad::Var<Real> classifier_logits(const ForwardContext<Real>& ctx, ad::Var<Real> hx_star,
                                const Batch& batch);

/// sigmoid(classifier_logits); [B, 1].
template <class Real>
ad::Var<Real> classify(const ForwardContext<Real>& ctx, ad::Var<Real> hx_star,
                       const Batch& batch);

/// Attention decoder: queries H^X*, keys/values H^X, then FFN and output
/// projection to [B, T, D].
template <class Real>
ad::Var<Real> impute(const ForwardContext<Real>& ctx, ad::Var<Real> hx_star,
                     ad::Var<Real> hx, std::span<const std::uint8_t> key_valid);

template <class Real>
struct ForwardOutput {
  ad::Var<Real> logits;                   // [B, 1]
  ad::Var<Real> probabilities;            // sigmoid(logits)
  std::optional<ad::Var<Real>> imputed;   // [B, T, D]
  ViewStates<Real> embedded;
  ad::Var<Real> final_state;              // H^X* after the last layer
};

/// Full pass. Train mode runs the decoder when the config enables it; eval
/// mode skips it unless `run_decoder` is set explicitly.
template <class Real>
ForwardOutput<Real> forward(const ForwardContext<Real>& ctx, const Batch& batch,
                            std::optional<bool> run_decoder = std::nullopt);

/// Eval-mode probabilities for every sample of `data`, in order.
template <class Real>
std::vector<double> predict(const ParameterSet<Real>& params, const ModelConfig& config,
                            const Dataset& data, std::size_t batch_size = 64);

}  // namespace miam
