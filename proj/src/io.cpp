#include "nsd/io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace nsd {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'N', 'S', 'D', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace

void save_nsdf(const fs::path& path, const Shape& shape, const std::vector<double>& data) {
    if (shape_numel(shape) != data.size()) throw Error("save_nsdf: shape/data mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("save_nsdf: cannot open " + path.string());
    os.write(kMagic, 4);
    write_u32(os, std::uint32_t(shape.size()));
    for (auto d : shape) write_u32(os, std::uint32_t(d));
    std::vector<float> payload(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) payload[i] = float(data[i]);
    // f32 little-endian; this code assumes a little-endian host.
    os.write(reinterpret_cast<const char*>(payload.data()),
             std::streamsize(payload.size() * sizeof(float)));
    if (!os) throw Error("save_nsdf: write failed for " + path.string());
}

void save_nsdf(const fs::path& path, const Tensor& t) { save_nsdf(path, t.shape(), t.data()); }

LoadedArray load_nsdf(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("load_nsdf: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw Error("load_nsdf: bad magic in " + path.string());
    }
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw Error("load_nsdf: implausible rank in " + path.string());
    LoadedArray out;
    out.shape.resize(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        out.shape[i] = read_u32(is);
        n *= out.shape[i];
    }
    std::vector<float> payload(n);
    is.read(reinterpret_cast<char*>(payload.data()), std::streamsize(n * sizeof(float)));
    if (!is) throw Error("load_nsdf: truncated payload in " + path.string());
    out.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.data[i] = double(payload[i]);
    return out;
}

Tensor load_nsdf_tensor(const fs::path& path, bool requires_grad) {
    LoadedArray a = load_nsdf(path);
    return Tensor::from_data(std::move(a.shape), std::move(a.data), requires_grad);
}

void Manifest::set_double(const std::string& key, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    kv_[key] = os.str();
}

void Manifest::set_int(const std::string& key, long long v) { kv_[key] = std::to_string(v); }

const std::string& Manifest::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw Error("manifest: missing key '" + key + "'");
    return it->second;
}

std::string Manifest::get_or(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

double Manifest::get_double(const std::string& key) const {
    return std::stod(get(key));
}

long long Manifest::get_int(const std::string& key) const {
    return std::stoll(get(key));
}

std::string Manifest::serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << "=" << v << "\n";
    return os.str();
}

void Manifest::save(const fs::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("manifest: cannot open " + path.string());
    os << serialize();
}

Manifest Manifest::load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifactError("manifest: cannot open " + path.string());
    Manifest m;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error("manifest: malformed line '" + line + "' in " + path.string());
        }
        m.kv_[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
}

std::string sanitize_param_filename(const std::string& name) {
    std::string s = name;
    for (auto& c : s) {
        if (c == '/' || c == '\\' || c == ':') c = '.';
    }
    return s;
}

void save_checkpoint(const fs::path& dir,
                     const std::vector<std::pair<std::string, Tensor>>& params,
                     const Manifest& manifest) {
    fs::create_directories(dir);
    Manifest m = manifest;
    for (const auto& [name, t] : params) {
        const std::string file = sanitize_param_filename(name) + ".nsdf";
        save_nsdf(dir / file, t);
        m.set("param." + name, file);
    }
    m.save(dir / "manifest.txt");
}

Manifest load_checkpoint(const fs::path& dir,
                         std::vector<std::pair<std::string, Tensor>>& params) {
    Manifest m = Manifest::load(dir / "manifest.txt");
    for (auto& [name, t] : params) {
        const std::string key = "param." + name;
        if (!m.has(key)) throw MissingArtifactError("checkpoint " + dir.string() +
                                                    " lacks param '" + name + "'");
        LoadedArray a = load_nsdf(dir / m.get(key));
        if (a.shape != t.shape()) {
            throw Error("checkpoint param '" + name + "' shape " + shape_str(a.shape) +
                        " does not match model " + shape_str(t.shape()));
        }
        t.data() = std::move(a.data);
    }
    return m;
}

Manifest load_checkpoint_manifest(const fs::path& dir) {
    return Manifest::load(dir / "manifest.txt");
}

}  // namespace nsd
