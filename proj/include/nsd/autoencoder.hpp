#pragma once

#include <filesystem>
#include <map>

#include "nsd/attention.hpp"
#include "nsd/neusdf.hpp"

namespace nsd {

// Per-plane strided group convolution: weights (3,Cout,Cin,kh,kw), one
// kernel group per plane, no cross-plane mixing.
Tensor group_downsample(const Tensor& tri, const Tensor& weights, const Tensor& bias,
                        std::size_t stride, std::size_t pad);

// (3,C,H,W) <-> (3HW, C) tokens; plane-major, row-major within a plane.
Tensor tokenize(const Tensor& tri);
Tensor untokenize(const Tensor& tokens, std::size_t channels, std::size_t h, std::size_t w);

struct AeConfig {
    std::size_t in_channels = 8;
    std::size_t in_res = 32;
    std::size_t stages = 2;            // stride-2 each, so f = 2^stages
    std::size_t token_width = 32;
    std::size_t heads = 4;
    std::size_t blocks_per_stage = 1;
    std::size_t latent_channels = 4;
    double kl_weight = 1e-6;
    double geo_weight = 0.1;
    std::size_t geo_points = 512;
    bool sape = true;
    std::string variant = "ours";  // ours | rollout | channel_concat

    std::size_t latent_res() const { return in_res >> stages; }
    void validate() const;
};

struct LatentTriPlane {
    Tensor z;        // (3,c,h,w)
    Tensor mean;     // (3,c,h,w)
    Tensor logvar;   // (3,c,h,w)
};

// U-shaped transformer autoencoder over tri-plane tokens. The rollout and
// channel_concat variants swap the token/attention stages for a plain conv
// stack over a rolled-out or channel-stacked image (ablation baselines).
class SpatialAutoencoder {
  public:
    SpatialAutoencoder() = default;
    SpatialAutoencoder(const AeConfig& cfg, Rng& rng);

    // sample_rng null: z = mean (inference); otherwise reparameterized.
    LatentTriPlane encode(const Tensor& tri, Rng* sample_rng) const;
    Tensor decode(const Tensor& z) const;

    const AeConfig& config() const { return cfg_; }
    ParamList params();
    void collect(const std::string& prefix, ParamList& out) const;

    void save(const std::filesystem::path& dir, const Manifest& extra = {}) const;
    static SpatialAutoencoder load(const std::filesystem::path& dir);

  private:
    struct Stage {
        Tensor conv_w, conv_b;  // group conv (3,Cout,Cin,3,3) / plain conv (Cout,Cin,3,3)
        Sape sape;
        std::vector<TransformerBlock> blocks;
    };

    Tensor encode_features(const Tensor& tri) const;  // up to the posterior head

    AeConfig cfg_;
    std::vector<Stage> enc_, dec_;
    Tensor enc_head_w, enc_head_b;  // 1x1 to 2c (mean,logvar)
    Tensor dec_in_w, dec_in_b;      // 1x1 from c
    Tensor dec_out_w, dec_out_b;    // 1x1 back to in_channels
};

struct AeLoss {
    Tensor total;
    double rec = 0, kl = 0, geo = 0;
    double value() const { return total.item(); }
};

// L_ae = mean L1 + w_kl * KL(posterior || N(0,I)) + w_geo * L_geo of the
// reconstruction through the frozen stage-1 decoder.
AeLoss ae_loss(const Tensor& x, const Tensor& x_rec, const Tensor& mean, const Tensor& logvar,
               const SdfDecoder* frozen_decoder, const SampleBatch* geo_batch,
               const GeoLossWeights& geo_weights, double kl_weight, double geo_weight);

struct AeTrainConfig {
    long steps = 2500;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    long checkpoint_every = 0;  // 0: only at the end
};

struct AeTrainHooks {
    std::function<void(long step, const AeLoss&)> on_step;
    std::function<void(long step, Adam& opt)> on_checkpoint;  // after f32 quantize
};

struct AeTrainItem {
    const TriPlane* triplane = nullptr;
    const SampleSet* samples = nullptr;
};

void train_autoencoder(SpatialAutoencoder& ae, const std::vector<AeTrainItem>& data,
                       const SdfDecoder& frozen_decoder, const GeoLossWeights& geo_weights,
                       const AeTrainConfig& cfg, Adam& opt, long start_step,
                       const AeTrainHooks& hooks = {});

}  // namespace nsd
