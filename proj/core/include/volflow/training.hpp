#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "volflow/flow/model.hpp"
#include "volflow/patching.hpp"
#include "volflow/volume.hpp"

namespace volflow {

struct TrainConfig {
    std::uint32_t iterations = 2000;
    std::uint32_t batch_size = 10;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    double dequant_bin = 1.0 / 1220.0;  ///< one HU step after normalization
    double grad_clip_norm = 50.0;
    std::uint32_t log_every = 50;
    std::uint32_t checkpoint_every = 500;
    std::uint32_t threads = 1;
};

void validate(const TrainConfig& c);

struct TrainState {
    FlowModel<double> model;
    FlowParams<double> m1, m2;  ///< Adam moments, shaped like model.params
    std::uint64_t step = 0;
    std::vector<double> bpd_history;  ///< loss at every step, in order
};

TrainState make_train_state(const FlowConfig& cfg, std::uint64_t seed);

/// Yields training patches as (1, E, E, E) tensors.
class PatchSource {
  public:
    virtual ~PatchSource() = default;
    virtual Tensor4<double> next() = 0;
};

/// Samples patches on the fly, with replacement, from a set of normalized
/// volumes: volume index uniform, origin uniform over positions with mask
/// coverage >= min_mask_fraction. Deterministic given seed.
class VolumePatchSource : public PatchSource {
  public:
    VolumePatchSource(std::vector<Volume> volumes, std::vector<Mask> masks,
                      std::uint32_t patch_edge, double min_mask_fraction,
                      std::uint64_t seed);

    Tensor4<double> next() override;

  private:
    std::vector<Volume> volumes_;
    std::vector<OriginSampler> samplers_;
    std::uint32_t edge_;
    Rng rng_;
};

/// Mean NLL of the batch in bits per dimension. Uniform noise in
/// [0, dequant_bin) is added element-wise before evaluating log_prob.
/// Throws NumericError if the loss is not finite.
double nll_loss(const FlowModel<double>& model,
                const std::vector<Tensor4<double>>& batch, double dequant_bin,
                Rng& noise);

/// Loss plus parameter gradients for one (already dequantized) batch.
/// `grads` must be shaped like the model parameters and is accumulated
/// into. Returns {bits_per_dim, pre-clip global gradient norm}. The
/// reduction over samples is in sample order regardless of thread count,
/// so results are bit-identical across `threads` values.
struct BatchGradResult {
    double bits_per_dim = 0;
    double grad_norm = 0;
};
BatchGradResult nll_loss_and_grad(const FlowModel<double>& model,
                                  const std::vector<Tensor4<double>>& batch,
                                  FlowParams<double>& grads,
                                  std::uint32_t threads);

/// Compare analytic gradients against central finite differences
/// (h = 1e-5 * (|theta| + 1)) on a random subset of at least
/// `min_params` parameters; the loss is the noise-free single-sample NLL
/// of `x`. Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
double grad_check(const FlowModel<double>& model, const Tensor4<double>& x,
                  std::size_t min_params = 200, std::uint64_t seed = 17);

/// One optimizer step: verify gradients finite (else NumericError, state
/// untouched), clip by global norm, apply decoupled weight decay
/// (theta -= lr*wd*theta), then bias-corrected Adam.
void adam_step(TrainState& state, const FlowParams<double>& grads,
               const TrainConfig& cfg);

/// Full training loop: actnorm init on the first batch, then
/// cfg.iterations optimizer steps. Writes a checkpoint after init, every
/// cfg.checkpoint_every steps, and at the end; appends CSV rows
/// (step, bits_per_dim, grad_norm, wallclock_s) to log_csv_path at step 1,
/// every cfg.log_every steps, and at the end (empty path disables the
/// log). On a numeric error the last written checkpoint is left in place
/// and the error is rethrown with the failing step attached.
TrainState train(PatchSource& source, const FlowConfig& fcfg,
                 const TrainConfig& cfg, const std::string& checkpoint_path,
                 const std::string& log_csv_path = "");

}  // namespace volflow
