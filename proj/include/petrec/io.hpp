#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "petrec/core.hpp"
#include "petrec/projector.hpp"

// On-disk formats. `.tensor` files carry a one-line JSON header followed by
// a raw little-endian f64 payload; the system-model cache stores the CSR
// triplet arrays behind a checksummed JSON header.

namespace petrec::io {

using nlohmann::json;

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write " + path.string());
    out << text;
    check(out.good(), "short write to " + path.string());
}

namespace detail {

template <class T>
void write_raw(std::ostream& out, const T* p, std::size_t count) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(count * sizeof(T)));
}

template <class T>
void read_raw(std::istream& in, T* p, std::size_t count) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(count * sizeof(T)));
    check(in.gcount() == static_cast<std::streamsize>(count * sizeof(T)), "truncated payload");
}

inline json read_header_line(std::istream& in, const std::string& path) {
    std::string line;
    std::getline(in, line);
    check(in.good() && !line.empty(), "missing header in " + path);
    json h = json::parse(line, nullptr, false);
    check(!h.is_discarded(), "bad header JSON in " + path);
    return h;
}

}  // namespace detail

struct TensorFile {
    Tensor tensor;
    std::string role;
    std::uint64_t seed = 0;
};

inline void save_tensor(const std::filesystem::path& path, const Tensor& t,
                        const std::string& role, std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write " + path.string());
    json h;
    h["shape"] = t.shape;
    h["dtype"] = "f64le";
    h["role"] = role;
    h["seed"] = seed;
    out << h.dump() << '\n';
    detail::write_raw(out, t.data.data(), t.data.size());
    check(out.good(), "short write to " + path.string());
}

inline TensorFile load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open " + path.string());
    json h = detail::read_header_line(in, path.string());
    check(h.value("dtype", "") == "f64le", "unsupported dtype in " + path.string());
    TensorFile out;
    out.role = h.value("role", "");
    out.seed = h.value("seed", std::uint64_t{0});
    std::vector<int> shape = h.at("shape").get<std::vector<int>>();
    out.tensor = Tensor(shape);
    detail::read_raw(in, out.tensor.data.data(), out.tensor.data.size());
    return out;
}

inline std::uint64_t csr_checksum(const CsrMatrix& m) {
    std::uint64_t h = 1469598103934665603ull;
    h = fnv1a64(m.row_offsets.data(), m.row_offsets.size() * sizeof(std::uint64_t), h);
    h = fnv1a64(m.col_idx.data(), m.col_idx.size() * sizeof(std::uint32_t), h);
    h = fnv1a64(m.vals.data(), m.vals.size() * sizeof(double), h);
    return h;
}

inline void save_system_model(const std::filesystem::path& path, const SystemModel& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write " + path.string());
    json h;
    h["format"] = "petrec-system-model";
    h["grid"] = {{"n_pixels_per_side", m.grid.n_pixels_per_side},
                 {"pixel_size", m.grid.pixel_size}};
    h["sino"] = {{"n_angles", m.sino.n_angles},
                 {"n_bins", m.sino.n_bins},
                 {"bin_width", m.sino.bin_width}};
    h["nnz"] = m.matrix.vals.size();
    h["checksum"] = csr_checksum(m.matrix);
    out << h.dump() << '\n';
    detail::write_raw(out, m.matrix.row_offsets.data(), m.matrix.row_offsets.size());
    detail::write_raw(out, m.matrix.col_idx.data(), m.matrix.col_idx.size());
    detail::write_raw(out, m.matrix.vals.data(), m.matrix.vals.size());
    check(out.good(), "short write to " + path.string());
}

inline SystemModel load_system_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open " + path.string());
    json h = detail::read_header_line(in, path.string());
    check(h.value("format", "") == "petrec-system-model", "not a system model: " + path.string());

    SystemModel m;
    m.grid.n_pixels_per_side = h.at("grid").at("n_pixels_per_side").get<int>();
    m.grid.pixel_size = h.at("grid").at("pixel_size").get<double>();
    m.sino.n_angles = h.at("sino").at("n_angles").get<int>();
    m.sino.n_bins = h.at("sino").at("n_bins").get<int>();
    m.sino.bin_width = h.at("sino").at("bin_width").get<double>();

    const std::size_t nnz = h.at("nnz").get<std::size_t>();
    m.matrix.rows = m.sino.n_angles * m.sino.n_bins;
    m.matrix.cols = m.grid.n_pixels_per_side * m.grid.n_pixels_per_side;
    m.matrix.row_offsets.resize(static_cast<std::size_t>(m.matrix.rows) + 1);
    m.matrix.col_idx.resize(nnz);
    m.matrix.vals.resize(nnz);
    detail::read_raw(in, m.matrix.row_offsets.data(), m.matrix.row_offsets.size());
    detail::read_raw(in, m.matrix.col_idx.data(), m.matrix.col_idx.size());
    detail::read_raw(in, m.matrix.vals.data(), m.matrix.vals.size());
    check(csr_checksum(m.matrix) == h.at("checksum").get<std::uint64_t>(),
          "checksum mismatch in " + path.string());

    const int n = m.grid.n_pixels_per_side;
    const double half_idx = 0.5 * (n - 1), r_fov = 0.5 * n * m.grid.pixel_size;
    m.fov = Tensor({n, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const double xc = (c - half_idx) * m.grid.pixel_size;
            const double yc = (half_idx - r) * m.grid.pixel_size;
            m.fov.at(r, c) = std::hypot(xc, yc) <= r_fov ? 1.0 : 0.0;
        }
    Tensor ones({m.matrix.rows}, 1.0);
    m.sensitivity = Tensor({n, n});
    m.matrix.apply_transpose(ones.data.data(), m.sensitivity.data.data());
    return m;
}

/// Loads a cached model when the specs match, otherwise builds and caches.
inline SystemModel load_or_build_system_model(const std::filesystem::path& cache_path,
                                              const GridSpec& grid, const SinogramSpec& sino) {
    if (std::filesystem::exists(cache_path)) {
        SystemModel m = load_system_model(cache_path);
        if (m.grid.n_pixels_per_side == grid.n_pixels_per_side &&
            m.grid.pixel_size == grid.pixel_size && m.sino.n_angles == sino.n_angles &&
            m.sino.n_bins == sino.n_bins && m.sino.bin_width == sino.bin_width)
            return m;
    }
    SystemModel m = build_system_model(grid, sino);
    if (!cache_path.empty()) {
        if (!cache_path.parent_path().empty())
            std::filesystem::create_directories(cache_path.parent_path());
        save_system_model(cache_path, m);
    }
    return m;
}

}  // namespace petrec::io
