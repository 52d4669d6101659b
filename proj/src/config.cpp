#include "nsd/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace nsd {

const std::vector<std::pair<std::string, std::string>>& RunConfig::schema() {
    static const std::vector<std::pair<std::string, std::string>> s = {
        {"global.seed", "0"},
        {"global.workers", "2"},

        {"geometry.classes", "3"},
        {"geometry.per_class", "64"},
        {"geometry.surface_samples", "20000"},
        {"geometry.offsurface_samples", "20000"},

        {"neusdf.resolution", "32"},
        {"neusdf.channels", "8"},
        {"neusdf.decoder_layers", "4"},
        {"neusdf.decoder_width", "64"},
        {"neusdf.softplus_beta", "100"},
        {"neusdf.lambda1", "100.0"},
        {"neusdf.lambda2", "3.0"},
        {"neusdf.lambda3", "1.0"},
        {"neusdf.lambda4", "0.5"},
        {"neusdf.delta", "0"},  // 0: half a texel, 1/(2H)
        {"neusdf.surface_batch", "512"},
        {"neusdf.offsurface_batch", "512"},
        {"neusdf.joint_shapes", "8"},
        {"neusdf.joint_steps", "4000"},
        {"neusdf.shape_steps", "2500"},
        {"neusdf.lr_planes", "0.01"},
        {"neusdf.lr_decoder", "0.0001"},
        {"neusdf.plane_clamp", "5.0"},
        {"neusdf.plateau_rel", "0.001"},
        {"neusdf.plateau_window", "500"},
        {"neusdf.sphere_init_radius", "0.5"},

        {"ae.stages", "2"},
        {"ae.token_width", "32"},
        {"ae.heads", "4"},
        {"ae.blocks_per_stage", "1"},
        {"ae.latent_channels", "4"},
        {"ae.kl_weight", "1e-06"},
        {"ae.geo_weight", "0.1"},
        {"ae.geo_points", "512"},
        {"ae.sape", "on"},
        {"ae.variant", "ours"},
        {"ae.steps", "2500"},
        {"ae.lr", "0.001"},
        {"ae.checkpoint_every", "500"},

        {"diffusion.T", "1000"},
        {"diffusion.beta_min", "0.0001"},
        {"diffusion.beta_max", "0.02"},
        {"diffusion.width", "96"},
        {"diffusion.blocks", "6"},
        {"diffusion.heads", "4"},
        {"diffusion.ffn_mult", "4"},
        {"diffusion.sape", "on"},
        {"diffusion.steps", "2500"},
        {"diffusion.lr", "0.001"},
        {"diffusion.cond_drop", "0.1"},
        {"diffusion.condition", "none"},  // none | label | pointcloud
        {"diffusion.cond_dim", "64"},
        {"diffusion.cond_points", "256"},
        {"diffusion.space", "latent"},  // latent | raw
        {"diffusion.checkpoint_every", "500"},
        {"diffusion.posterior_samples", "3"},

        {"sample.steps", "50"},
        {"sample.count", "16"},
        {"sample.guidance", "3.0"},
        {"sample.ancestral", "off"},

        {"extract.resolution", "128"},
        {"extract.max_memory_mb", "2048"},

        {"metrics.emd_points", "256"},
        {"metrics.fscore_tau", "0.02"},
        {"metrics.eval_points", "2048"},
    };
    return s;
}

RunConfig::RunConfig() {
    for (const auto& [k, v] : schema()) values_[k] = v;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
}

void RunConfig::apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override must be key=value, got '" + kv + "'");
    }
    set(kv.substr(0, eq), kv.substr(eq + 1));
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        const auto b = line.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t");
        line = line.substr(b, e - b + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        }
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto strip = [](std::string& s) {
            const auto b2 = s.find_first_not_of(" \t");
            if (b2 == std::string::npos) {
                s.clear();
                return;
            }
            const auto e2 = s.find_last_not_of(" \t");
            s = s.substr(b2, e2 - b2 + 1);
        };
        strip(key);
        strip(value);
        if (values_.find(key) == values_.end()) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                              ": unknown config key '" + key + "'");
        }
        values_[key] = value;
    }
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

long long RunConfig::get_int(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const double v = std::stod(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::string RunConfig::canonical() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

std::string RunConfig::digest_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)digest());
    return std::string(buf);
}

}  // namespace nsd
