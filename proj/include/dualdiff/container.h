#pragma once

// Self-describing binary container shared by every checkpoint in the project.
//
// Layout (all integers little-endian uint32, arrays little-endian float64):
//   "DDCK" | version | n_meta | { key_len key value_len value }*
//          | n_arrays | { name_len name ndim dim[ndim] data[prod(dim)] }*
// Metadata values are strings; numeric values are written with full
// round-trip precision.

#include "dualdiff/tensor.h"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace dualdiff {

class Container {
public:
    static constexpr std::uint32_t kVersion = 1;

    void set(const std::string& key, const std::string& value) { meta_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, long long value);
    void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }

    bool has(const std::string& key) const { return meta_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    long long get_int(const std::string& key) const;
    const std::map<std::string, std::string>& meta() const { return meta_; }

    void put(const std::string& name, Tensor t);
    bool has_array(const std::string& name) const;
    const Tensor& array(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& arrays() const { return arrays_; }

    void save(const std::filesystem::path& path) const;
    static Container load(const std::filesystem::path& path);

private:
    std::map<std::string, std::string> meta_;
    std::vector<std::pair<std::string, Tensor>> arrays_;
};

std::string format_double(double v);

}  // namespace dualdiff
