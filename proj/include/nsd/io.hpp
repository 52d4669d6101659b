#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nsd/tensor.hpp"

namespace nsd {

// NSDF binary array: magic "NSD1", u32 LE rank, rank x u32 LE extents,
// f32 LE row-major payload.
void save_nsdf(const std::filesystem::path& path, const Shape& shape,
               const std::vector<double>& data);
void save_nsdf(const std::filesystem::path& path, const Tensor& t);

struct LoadedArray {
    Shape shape;
    std::vector<double> data;
};
LoadedArray load_nsdf(const std::filesystem::path& path);
Tensor load_nsdf_tensor(const std::filesystem::path& path, bool requires_grad = false);

// UTF-8 key=value manifest, keys kept sorted so files diff cleanly.
class Manifest {
  public:
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_double(const std::string& key, double v);
    void set_int(const std::string& key, long long v);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    long long get_int(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

    std::string serialize() const;
    void save(const std::filesystem::path& path) const;
    static Manifest load(const std::filesystem::path& path);

  private:
    std::map<std::string, std::string> kv_;
};

// Checkpoints: a directory of named NSDF arrays plus manifest.txt.
void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, Tensor>>& params,
                     const Manifest& manifest);
Manifest load_checkpoint(const std::filesystem::path& dir,
                         std::vector<std::pair<std::string, Tensor>>& params);
Manifest load_checkpoint_manifest(const std::filesystem::path& dir);

std::string sanitize_param_filename(const std::string& name);

}  // namespace nsd
