#pragma once

#include "cvattn/config_json.hpp"

namespace cvattn {

// Checkpoint container: "CVCK", u32 version, u32 json_len, canonical JSON
// header {config: UNetConfig, precision: f32|f64}, u32 param count, then per
// parameter a u32 name length, the name bytes, and a TNSR record. Bit-exact
// round-trip: save(load(p)) reproduces p byte for byte.

template <typename S>
void save_checkpoint(const Model<S>& model, const std::string& path) {
    atomic_write(path, [&](const std::string& tmp) { detail_save_checkpoint(model, tmp); });
}

template <typename S>
void detail_save_checkpoint(const Model<S>& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("CVCK", 4);
    detail::put_u32(os, 1);
    const std::string header =
        json{{"config", to_json(model.cfg)}, {"precision", std::is_same_v<S, float> ? "f32" : "f64"}}
            .dump();
    detail::put_u32(os, static_cast<std::uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(model.params.size()));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const std::string& name = model.params.name(i);
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tnsr(model.params.at(i), os);
    }
    if (!os) throw IoError("write failed: " + path);
}

/// Reads only the JSON header.
inline json checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CVCK", 4) != 0) throw IoError("bad checkpoint magic: " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != 1) throw IoError("unsupported checkpoint version: " + path);
    const std::uint32_t len = detail::get_u32(is);
    std::string header(len, '\0');
    is.read(header.data(), len);
    if (!is) throw IoError("truncated checkpoint header: " + path);
    return json::parse(header);
}

inline std::string checkpoint_precision(const std::string& path) {
    return checkpoint_header(path).value("precision", "f32");
}

template <typename S>
Model<S> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CVCK", 4) != 0) throw IoError("bad checkpoint magic: " + path);
    if (detail::get_u32(is) != 1) throw IoError("unsupported checkpoint version: " + path);
    const std::uint32_t len = detail::get_u32(is);
    std::string header(len, '\0');
    is.read(header.data(), len);
    if (!is) throw IoError("truncated checkpoint header: " + path);
    const json h = json::parse(header);
    const std::string want = std::is_same_v<S, float> ? "f32" : "f64";
    if (h.value("precision", "f32") != want) {
        throw IoError("checkpoint precision " + h.value("precision", "f32") + " does not match " +
                      want + ": " + path);
    }
    Model<S> model = build<S>(unet_config_from_json(h.at("config")));
    const std::uint32_t n = detail::get_u32(is);
    if (n != model.params.size()) {
        throw IoError("checkpoint has " + std::to_string(n) + " parameters, config implies " +
                      std::to_string(model.params.size()) + ": " + path);
    }
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        if (name_len > 4096) throw IoError("bad parameter name length: " + path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        Tensor<S> t = read_tnsr<S>(is);
        model.params.set(model.params.find(name), std::move(t));
    }
    if (!is) throw IoError("truncated checkpoint payload: " + path);
    return model;
}

}  // namespace cvattn
