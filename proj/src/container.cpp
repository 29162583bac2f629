#include "dualdiff/container.h"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dualdiff {
namespace {

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is, const std::string& ctx) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error(ctx + ": truncated file");
    return v;
}

std::string read_str(std::istream& is, const std::string& ctx) {
    const std::uint32_t n = read_u32(is, ctx);
    if (n > (1u << 24)) throw std::runtime_error(ctx + ": implausible string length");
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw std::runtime_error(ctx + ": truncated file");
    return s;
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void Container::set(const std::string& key, double value) { meta_[key] = format_double(value); }

void Container::set(const std::string& key, long long value) { meta_[key] = std::to_string(value); }

const std::string& Container::get(const std::string& key) const {
    auto it = meta_.find(key);
    if (it == meta_.end()) throw std::runtime_error("container: missing metadata '" + key + "'");
    return it->second;
}

double Container::get_double(const std::string& key) const {
    const std::string& s = get(key);
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw std::runtime_error("container: metadata '" + key + "' is not a number: " + s);
    }
    return v;
}

long long Container::get_int(const std::string& key) const {
    const std::string& s = get(key);
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw std::runtime_error("container: metadata '" + key + "' is not an integer: " + s);
    }
    return v;
}

void Container::put(const std::string& name, Tensor t) {
    for (auto& [n, a] : arrays_) {
        if (n == name) {
            a = std::move(t);
            return;
        }
    }
    arrays_.emplace_back(name, std::move(t));
}

bool Container::has_array(const std::string& name) const {
    for (const auto& [n, a] : arrays_) {
        if (n == name) return true;
    }
    return false;
}

const Tensor& Container::array(const std::string& name) const {
    for (const auto& [n, a] : arrays_) {
        if (n == name) return a;
    }
    throw std::runtime_error("container: missing array '" + name + "'");
}

void Container::save(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp);
        os.write("DDCK", 4);
        write_u32(os, kVersion);
        write_u32(os, static_cast<std::uint32_t>(meta_.size()));
        for (const auto& [k, v] : meta_) {
            write_str(os, k);
            write_str(os, v);
        }
        write_u32(os, static_cast<std::uint32_t>(arrays_.size()));
        for (const auto& [name, t] : arrays_) {
            write_str(os, name);
            write_u32(os, static_cast<std::uint32_t>(t.ndim()));
            for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
            os.write(reinterpret_cast<const char*>(t.ptr()),
                     static_cast<std::streamsize>(t.size() * sizeof(double)));
        }
        if (!os) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Container Container::load(const std::filesystem::path& path) {
    const std::string ctx = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + ctx);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DDCK", 4) != 0) {
        throw std::runtime_error(ctx + ": not a checkpoint container (bad magic)");
    }
    const std::uint32_t version = read_u32(is, ctx);
    if (version != kVersion) {
        throw std::runtime_error(ctx + ": unsupported container version " + std::to_string(version));
    }
    is.seekg(0, std::ios::end);
    const auto file_size = static_cast<unsigned long long>(is.tellg());
    is.seekg(8);
    Container c;
    const std::uint32_t n_meta = read_u32(is, ctx);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = read_str(is, ctx);
        c.meta_[k] = read_str(is, ctx);
    }
    const std::uint32_t n_arrays = read_u32(is, ctx);
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = read_str(is, ctx);
        const std::uint32_t ndim = read_u32(is, ctx);
        if (ndim > 8) throw std::runtime_error(ctx + ": array '" + name + "' has too many dims");
        std::vector<int> shape(ndim);
        unsigned long long count = 1;
        for (auto& d : shape) {
            const std::uint32_t v = read_u32(is, ctx);
            if (v > (1u << 30)) throw std::runtime_error(ctx + ": array '" + name + "' has an implausible shape");
            d = static_cast<int>(v);
            count *= v;
            if (count * sizeof(double) > file_size) throw std::runtime_error(ctx + ": truncated array '" + name + "'");
        }
        Tensor t(shape);
        if (!is.read(reinterpret_cast<char*>(t.ptr()),
                     static_cast<std::streamsize>(t.size() * sizeof(double)))) {
            throw std::runtime_error(ctx + ": truncated array '" + name + "'");
        }
        c.arrays_.emplace_back(std::move(name), std::move(t));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error(ctx + ": trailing bytes after the last array");
    return c;
}

}  // namespace dualdiff
