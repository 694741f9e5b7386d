#ifndef STEERLAB_CHECKPOINT_HPP
#define STEERLAB_CHECKPOINT_HPP

// Binary tensor container: header (magic, version, model config) followed by
// named tensors stored as row-major 64-bit little-endian floats. Round trips
// are bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/numerics.hpp"

namespace steerlab {

constexpr char kCheckpointMagic[8] = {'S', 'T', 'E', 'E', 'R', 'L', 'A', 'B'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::vector<double> data;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace detail

inline void write_tensor_file(const std::string& path, const ModelConfig& cfg,
                              const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_u32(os, kCheckpointVersion);
    detail::write_u64(os, cfg.vocab_size);
    detail::write_u64(os, cfg.d_model);
    detail::write_u64(os, cfg.n_layers);
    detail::write_u64(os, cfg.n_heads);
    detail::write_u64(os, cfg.max_seq_len);
    os.put(cfg.tie_embeddings ? 1 : 0);
    detail::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        detail::write_u32(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        std::uint64_t count = 1;
        for (auto d : t.shape) {
            detail::write_u64(os, d);
            count *= d;
        }
        if (count != t.data.size())
            throw std::invalid_argument("tensor shape/data mismatch: " + t.name);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

struct TensorFile {
    ModelConfig config;
    std::vector<NamedTensor> tensors;

    const NamedTensor& find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::runtime_error("tensor not found: " + name);
    }
};

inline TensorFile read_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("bad magic in " + path);
    std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version in " + path);
    TensorFile f;
    f.config.vocab_size = detail::read_u64(is);
    f.config.d_model = detail::read_u64(is);
    f.config.n_layers = detail::read_u64(is);
    f.config.n_heads = detail::read_u64(is);
    f.config.max_seq_len = detail::read_u64(is);
    f.config.tie_embeddings = is.get() != 0;
    std::uint32_t n = detail::read_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        NamedTensor t;
        std::uint32_t name_len = detail::read_u32(is);
        t.name.resize(name_len);
        is.read(t.name.data(), name_len);
        std::uint32_t ndims = detail::read_u32(is);
        std::uint64_t count = 1;
        for (std::uint32_t d = 0; d < ndims; ++d) {
            t.shape.push_back(detail::read_u64(is));
            count *= t.shape.back();
        }
        t.data.resize(count);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!is) throw std::runtime_error("truncated tensor file: " + path);
        f.tensors.push_back(std::move(t));
    }
    return f;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p) {
    std::vector<NamedTensor> ts;
    auto push_mat = [&](const std::string& name, const Matrix& m) {
        ts.push_back({name, {m.rows, m.cols}, m.data});
    };
    auto push_vec = [&](const std::string& name, const Vector& v) {
        ts.push_back({name, {v.size()}, v});
    };
    push_mat("token_embedding", p.token_embedding);
    push_mat("positional_embedding", p.positional_embedding);
    if (!p.config.tie_embeddings) push_mat("output_head", p.output_head_untied);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const std::string prefix = "block" + std::to_string(l) + ".";
        BlockParams& b = const_cast<BlockParams&>(p.blocks[l]);
        b.for_each_tensor([&](const char* name, double* data, std::size_t n) {
            NamedTensor t;
            t.name = prefix + name;
            t.shape = {n};
            t.data.assign(data, data + n);
            ts.push_back(std::move(t));
        });
    }
    push_vec("final_bias", p.final_bias);
    write_tensor_file(path, p.config, ts);
}

inline ModelParams load_checkpoint(const std::string& path) {
    TensorFile f = read_tensor_file(path);
    f.config.validate();
    ModelParams p;
    p.config = f.config;
    auto load_mat = [&](const std::string& name, std::size_t r, std::size_t c) {
        const NamedTensor& t = f.find(name);
        if (t.data.size() != r * c) throw std::runtime_error("tensor size mismatch: " + name);
        Matrix m(r, c);
        m.data = t.data;
        return m;
    };
    p.token_embedding = load_mat("token_embedding", f.config.vocab_size, f.config.d_model);
    p.positional_embedding =
        load_mat("positional_embedding", f.config.max_seq_len, f.config.d_model);
    if (!f.config.tie_embeddings)
        p.output_head_untied = load_mat("output_head", f.config.vocab_size, f.config.d_model);
    for (std::size_t l = 0; l < f.config.n_layers; ++l) {
        const std::string prefix = "block" + std::to_string(l) + ".";
        BlockParams b = BlockParams::zeros_like(f.config);
        b.for_each_tensor([&](const char* name, double* data, std::size_t n) {
            const NamedTensor& t = f.find(prefix + name);
            if (t.data.size() != n) throw std::runtime_error("tensor size mismatch: " + t.name);
            std::memcpy(data, t.data.data(), n * sizeof(double));
        });
        p.blocks.push_back(std::move(b));
    }
    const NamedTensor& fb = f.find("final_bias");
    p.final_bias = fb.data;
    return p;
}

}  // namespace steerlab

#endif  // STEERLAB_CHECKPOINT_HPP
