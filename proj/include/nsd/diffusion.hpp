#pragma once

#include <filesystem>
#include <optional>

#include "nsd/attention.hpp"
#include "nsd/autoencoder.hpp"

namespace nsd {

// beta/alpha tables, 1-indexed by timestep; alpha_bar_at(0) == 1 by
// convention so the final DDIM transition returns the prediction exactly.
struct NoiseSchedule {
    long T = 0;
    std::vector<double> beta, alpha, alpha_bar, beta_tilde;

    static NoiseSchedule linear(long T, double beta_min, double beta_max);

    double beta_at(long t) const;        // t in [1,T]
    double alpha_at(long t) const;       // t in [1,T]
    double alpha_bar_at(long t) const;   // t in [0,T]
    double beta_tilde_at(long t) const;  // t in [1,T]

    // Training-schedule checks (alpha_bar_T below 0.01); toy schedules
    // with small T are constructible but not trainable.
    void validate_training() const;
};

// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
Tensor q_sample(const Tensor& z0, long t, const Tensor& eps, const NoiseSchedule& sched);

struct DenoiserConfig {
    std::size_t channels = 4;   // latent channels c
    std::size_t res = 8;        // latent h=w
    std::size_t width = 128;
    std::size_t blocks = 6;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    bool sape = true;
    bool conditional = false;
    std::size_t cond_dim = 64;
    long T = 1000;  // for the time embedding frequency range

    std::size_t tokens() const { return 3 * res * res; }
};

// x0-predicting token transformer over the flattened latent planes, with
// sinusoidal time embedding and optional per-block cross-attention.
class Denoiser {
  public:
    Denoiser() = default;
    Denoiser(const DenoiserConfig& cfg, Rng& rng);

    // condition: (M, cond_dim) or undefined for the unconditional model.
    Tensor forward(const Tensor& z_t, long t, const Tensor& condition = {}) const;

    const DenoiserConfig& config() const { return cfg_; }
    ParamList params();
    void collect(const std::string& prefix, ParamList& out) const;
    void save(const std::filesystem::path& dir, const Manifest& extra = {}) const;
    static Denoiser load(const std::filesystem::path& dir);

  private:
    struct Block {
        LayerNorm ln1, ln_cross, ln2;
        MultiHeadLinearAttention attn;
        CrossAttention cross;  // only when conditional
        FeedForward ffn;
    };

    DenoiserConfig cfg_;
    Linear proj_in_, time_mlp1_, time_mlp2_, proj_out_;
    LayerNorm ln_out_;
    Sape sape_;
    std::vector<Block> blocks_;
};

// Any x0 predictor; lets tests plug oracle stubs in place of the network.
using DenoiseFn = std::function<Tensor(const Tensor& z_t, long t, const Tensor& condition)>;

// ||Psi(q_sample(z0,t,eps), t, cond) - z0||^2, mean over elements.
Tensor ldm_loss(const DenoiseFn& psi, const Tensor& z0, long t, const Tensor& eps,
                const NoiseSchedule& sched, const Tensor& condition = {});
Tensor ldm_loss(const Denoiser& psi, const Tensor& z0, long t, const Tensor& eps,
                const NoiseSchedule& sched, const Tensor& condition = {});

Tensor cfg_combine(const Tensor& pred_cond, const Tensor& pred_uncond, double scale);

// Deterministic (eta=0) jump t -> t_next < t using the predicted clean
// latent; t_next == 0 returns the prediction exactly.
Tensor ddim_step(const Tensor& z_t, const Tensor& pred_z0, long t, long t_next,
                 const NoiseSchedule& sched);

// Evenly spaced decreasing grid of `steps` timesteps ending with a
// transition to 0.
std::vector<long> ddim_time_grid(long T, int steps);

struct SampleOptions {
    int steps = 50;
    double guidance = 3.0;
    bool ancestral = false;  // DDPM posterior sampling instead of DDIM
};

// Core loop over an arbitrary predictor (no CFG logic of its own).
Tensor sample(const DenoiseFn& predict, const Shape& latent_shape, const NoiseSchedule& sched,
              const SampleOptions& opt, Rng& rng, const Tensor& condition = {});

// Denoiser wrapper; applies classifier-free guidance when a condition is
// given and the model is conditional.
Tensor sample(const Denoiser& psi, const NoiseSchedule& sched, const SampleOptions& opt,
              Rng& rng, const Tensor& condition = {});

// ---------------------------------------------------------------------------
// condition encoders

// Permutation-invariant point-cloud embedding: per-point MLP, channelwise
// max pool, linear head. Output (1, cond_dim).
class PointCloudEncoder {
  public:
    PointCloudEncoder() = default;
    PointCloudEncoder(std::size_t cond_dim, std::size_t hidden, Rng& rng);
    Tensor encode(const Tensor& points) const;  // (N,3) -> (1, cond_dim)
    ParamList params();
    void collect(const std::string& prefix, ParamList& out) const;

  private:
    Linear l1_, l2_, head_;
};

class LabelEmbedding {
  public:
    LabelEmbedding() = default;
    LabelEmbedding(const std::vector<std::string>& vocab, std::size_t cond_dim, Rng& rng);
    Tensor encode(const std::string& label) const;  // (1, cond_dim)
    const std::vector<std::string>& vocab() const { return vocab_; }
    ParamList params();
    void collect(const std::string& prefix, ParamList& out) const;

  private:
    std::vector<std::string> vocab_;
    Tensor table_;  // (V, cond_dim)
};

inline Tensor null_condition(std::size_t cond_dim) { return Tensor::zeros({1, cond_dim}); }

// ---------------------------------------------------------------------------
// training

struct DiffusionTrainConfig {
    long steps = 3000;
    double lr = 1e-3;
    double cond_drop_prob = 0.1;
    std::uint64_t seed = 0;
    long checkpoint_every = 0;
};

struct DiffusionTrainHooks {
    std::function<void(long step, double loss)> on_step;
    std::function<void(long step, Adam& opt)> on_checkpoint;
};

struct DiffusionTrainItem {
    Tensor latent;  // (3,c,h,w), already normalized
    // re-encoded every step so condition-encoder params receive gradients
    std::function<Tensor()> condition;
};

// CFG: the condition is zero-masked with cond_drop_prob at each step.
void train_diffusion(Denoiser& psi, const std::vector<DiffusionTrainItem>& data,
                     const NoiseSchedule& sched, const DiffusionTrainConfig& cfg, Adam& opt,
                     long start_step, const DiffusionTrainHooks& hooks = {});

// Whether this training step nulls the condition (exposed for the drop-rate
// property test).
bool cfg_drop_decision(std::uint64_t seed, long step, double drop_prob);

}  // namespace nsd
