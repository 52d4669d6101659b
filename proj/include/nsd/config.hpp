#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nsd/common.hpp"

namespace nsd {

// Flat key=value config with section prefixes. Every key has a default;
// unknown keys are rejected with the offending line. The digest of the
// canonical serialization is stamped into every output manifest.
class RunConfig {
  public:
    RunConfig();  // desk-scale defaults

    void load_file(const std::filesystem::path& path);
    void apply_override(const std::string& key_eq_value);  // "key=value"
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;  // on/off/true/false/1/0

    std::string canonical() const;  // sorted key=value lines
    std::uint64_t digest() const { return fnv1a64(canonical()); }
    std::string digest_hex() const;

    const std::map<std::string, std::string>& values() const { return values_; }

    static const std::vector<std::pair<std::string, std::string>>& schema();

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace nsd
