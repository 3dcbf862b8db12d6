#ifndef VSEG_PARAMS_IO_HPP
#define VSEG_PARAMS_IO_HPP

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"

namespace vseg {

static_assert(std::endian::native == std::endian::little,
              "parameter files are little-endian; big-endian hosts are unsupported");

/// One named double array with an explicit shape.
struct NamedArray {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<double> values;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (std::int64_t d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }
};

/// Flat binary container used for network checkpoints and shape-model files:
/// 8-byte magic, array count, then per array: name length + name bytes +
/// rank + dims + raw doubles. All integers are 64-bit little-endian.
inline constexpr char kParamsMagic[8] = {'V', 'S', 'E', 'G', 'P', 'A', 'K', '1'};

namespace detail {
inline void write_i64(std::ostream& os, std::int64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::int64_t read_i64(std::istream& is, const std::string& path) {
    std::int64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw corrupt_file("truncated parameter file: " + path);
    return v;
}
} // namespace detail

inline void save_arrays(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kParamsMagic, 8);
    detail::write_i64(os, static_cast<std::int64_t>(arrays.size()));
    for (const NamedArray& a : arrays) {
        if (a.values.size() != a.element_count())
            throw std::invalid_argument("save_arrays: shape/value mismatch for " + a.name);
        detail::write_i64(os, static_cast<std::int64_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::write_i64(os, static_cast<std::int64_t>(a.shape.size()));
        for (std::int64_t d : a.shape) detail::write_i64(os, d);
        os.write(reinterpret_cast<const char*>(a.values.data()),
                 static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<NamedArray> load_arrays(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kParamsMagic))
        throw corrupt_file("bad magic in parameter file: " + path);
    const std::int64_t count = detail::read_i64(is, path);
    if (count < 0) throw corrupt_file("negative array count: " + path);
    std::vector<NamedArray> arrays;
    arrays.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        NamedArray a;
        const std::int64_t name_len = detail::read_i64(is, path);
        if (name_len < 0 || name_len > 4096) throw corrupt_file("bad name length: " + path);
        a.name.resize(static_cast<std::size_t>(name_len));
        if (!is.read(a.name.data(), name_len)) throw corrupt_file("truncated name: " + path);
        const std::int64_t rank = detail::read_i64(is, path);
        if (rank < 0 || rank > 8) throw corrupt_file("bad rank: " + path);
        a.shape.resize(static_cast<std::size_t>(rank));
        for (std::int64_t r = 0; r < rank; ++r) {
            a.shape[static_cast<std::size_t>(r)] = detail::read_i64(is, path);
            if (a.shape[static_cast<std::size_t>(r)] < 0)
                throw corrupt_file("negative dimension: " + path);
        }
        a.values.resize(a.element_count());
        if (!is.read(reinterpret_cast<char*>(a.values.data()),
                     static_cast<std::streamsize>(a.values.size() * sizeof(double))))
            throw corrupt_file("truncated array data: " + path);
        arrays.push_back(std::move(a));
    }
    return arrays;
}

inline const NamedArray& find_array(const std::vector<NamedArray>& arrays,
                                    const std::string& name) {
    for (const NamedArray& a : arrays)
        if (a.name == name) return a;
    throw corrupt_file("missing array: " + name);
}

inline bool has_array(const std::vector<NamedArray>& arrays, const std::string& name) {
    for (const NamedArray& a : arrays)
        if (a.name == name) return true;
    return false;
}

} // namespace vseg

#endif
