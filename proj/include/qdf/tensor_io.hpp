#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdf/error.hpp"

namespace qdf {

static_assert(std::endian::native == std::endian::little,
              "tensor dump format is little-endian; big-endian hosts are unsupported");

/// Writes `<base>.bin` (raw little-endian f64, row-major) and `<base>.json`
/// (sidecar with shape/order/dtype plus any extra keys).
inline void dump_tensor(const std::string& base, const double* data,
                        const std::vector<std::size_t>& shape,
                        const nlohmann::json& extra = nlohmann::json::object()) {
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;

    std::ofstream bin(base + ".bin", std::ios::binary);
    if (!bin) throw Error("dump_tensor: cannot open " + base + ".bin for writing");
    bin.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(count * sizeof(double)));
    if (!bin) throw Error("dump_tensor: short write to " + base + ".bin");

    nlohmann::json sidecar = extra;
    sidecar["shape"] = shape;
    sidecar["order"] = "row-major";
    sidecar["dtype"] = "f64le";
    std::ofstream meta(base + ".json");
    if (!meta) throw Error("dump_tensor: cannot open " + base + ".json for writing");
    meta << sidecar.dump(2) << "\n";
}

struct LoadedTensor {
    std::vector<double> data;
    std::vector<std::size_t> shape;
    nlohmann::json sidecar;
};

inline LoadedTensor load_tensor(const std::string& base) {
    std::ifstream meta(base + ".json");
    if (!meta) throw Error("load_tensor: cannot open " + base + ".json");
    LoadedTensor out;
    meta >> out.sidecar;
    if (out.sidecar.value("dtype", "") != "f64le" ||
        out.sidecar.value("order", "") != "row-major")
        throw Error("load_tensor: unsupported dtype/order in " + base + ".json");
    out.shape = out.sidecar.at("shape").get<std::vector<std::size_t>>();
    std::size_t count = 1;
    for (std::size_t d : out.shape) count *= d;

    std::ifstream bin(base + ".bin", std::ios::binary);
    if (!bin) throw Error("load_tensor: cannot open " + base + ".bin");
    out.data.resize(count);
    bin.read(reinterpret_cast<char*>(out.data.data()),
             static_cast<std::streamsize>(count * sizeof(double)));
    if (static_cast<std::size_t>(bin.gcount()) != count * sizeof(double))
        throw Error("load_tensor: short read from " + base + ".bin");
    return out;
}

} // namespace qdf
