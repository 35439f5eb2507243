#pragma once

#include "deften/tensor.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

namespace deften {

// On-disk tensor format: one JSON header line {"order", "shape", "name"}
// terminated by '\n', then order*... little-endian IEEE-754 doubles, flat in
// the tensor's row-major order. Headers are line-oriented so a stream of
// tensors can be walked without parsing payloads.

namespace detail {

inline void write_le_doubles(std::ostream& out, const double* data, Index count) {
    static_assert(sizeof(double) == 8);
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), count * 8);
    } else {
        for (Index i = 0; i < count; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, data + i, 8);
            char buf[8];
            for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>(bits >> (8 * b));
            out.write(buf, 8);
        }
    }
}

inline void read_le_doubles(std::istream& in, double* data, Index count) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(data), count * 8);
    } else {
        for (Index i = 0; i < count; ++i) {
            char buf[8];
            in.read(buf, 8);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
            std::memcpy(data + i, &bits, 8);
        }
    }
    if (!in) throw std::runtime_error("tensor payload truncated");
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const DenseTensor<double>& t, const std::string& name) {
    nlohmann::json header;
    header["order"] = t.order();
    header["shape"] = t.shape();
    header["name"] = name;
    out << header.dump() << '\n';
    detail::write_le_doubles(out, t.data(), t.size());
    if (!out) throw std::runtime_error("tensor write failed for '" + name + "'");
}

struct NamedTensor {
    std::string name;
    DenseTensor<double> tensor;
};

inline NamedTensor read_tensor(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("tensor header missing");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("tensor header is not valid JSON: ") + e.what());
    }
    if (!header.contains("order") || !header.contains("shape") || !header.contains("name"))
        throw std::runtime_error("tensor header missing order/shape/name");
    const Shape shape = header["shape"].get<Shape>();
    if (header["order"].get<Index>() != static_cast<Index>(shape.size()))
        throw std::runtime_error("tensor header order does not match shape length");

    NamedTensor named;
    named.name = header["name"].get<std::string>();
    named.tensor = DenseTensor<double>(shape);
    detail::read_le_doubles(in, named.tensor.data(), named.tensor.size());
    return named;
}

}  // namespace deften
