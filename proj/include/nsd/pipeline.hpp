#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "nsd/config.hpp"

namespace nsd {

// Shared command options (CLI flags map straight onto this).
struct RunOptions {
    bool resume = false;
    std::size_t workers = 0;   // 0: take global.workers from the config
    long halt_after = 0;       // stop a training run after N steps (simulated kill)
};

struct CommandResult {
    int exit_code = 0;
    std::string message;
};

// gen-data: corpus of procedural shapes + sample sets.
CommandResult cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out_dir,
                           const RunOptions& opt = {});

// fit: stage 1. Joint warm-up on the first K shapes, then per-shape fits
// against the frozen decoder.
CommandResult cmd_fit(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                      const std::filesystem::path& out_dir, const RunOptions& opt = {});

// train-ae: stage 2 over the fitted tri-planes.
CommandResult cmd_train_ae(const RunConfig& cfg, const std::filesystem::path& fits_dir,
                           const std::filesystem::path& corpus_dir,
                           const std::filesystem::path& out_dir, const RunOptions& opt = {});

// train-diffusion: stage 3 over AE latents (or raw planes with
// diffusion.space=raw).
CommandResult cmd_train_diffusion(const RunConfig& cfg, const std::filesystem::path& ae_dir,
                                  const std::filesystem::path& fits_dir,
                                  const std::filesystem::path& corpus_dir,
                                  const std::filesystem::path& out_dir,
                                  const RunOptions& opt = {});

struct SampleCommandOptions {
    std::string condition = "none";  // none | label | pointcloud
    std::string label;
    std::filesystem::path cloud_path;  // NSDF (N,3)
};

CommandResult cmd_sample(const RunConfig& cfg, const std::filesystem::path& diffusion_dir,
                         const std::filesystem::path& out_dir,
                         const SampleCommandOptions& sopt = {}, const RunOptions& opt = {});

// extract: NSDF latents or raw tri-planes -> meshes. ae_dir may be empty
// when the inputs are raw tri-planes.
CommandResult cmd_extract(const RunConfig& cfg, const std::filesystem::path& input_dir,
                          const std::filesystem::path& decoder_dir,
                          const std::filesystem::path& ae_dir,
                          const std::filesystem::path& out_dir, const RunOptions& opt = {});

// eval: directories of OBJ meshes (or NSDF clouds) -> report.json + pairs.csv.
CommandResult cmd_eval(const RunConfig& cfg, const std::filesystem::path& gen_dir,
                       const std::filesystem::path& ref_dir,
                       const std::filesystem::path& out_dir, const RunOptions& opt = {});

}  // namespace nsd
