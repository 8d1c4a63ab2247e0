// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: manifest.json plus weights.bin, a row-major
// little-endian float32 payload whose layout the manifest describes.

#pragma once

#include "g2p2/eval.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace g2p2 {

inline constexpr int checkpoint_format_version = 1;

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json seeds = nlohmann::json::object();
    std::vector<std::string> vocabulary;
    std::vector<std::pair<std::string, Mat<float>>> tensors;

    const Mat<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t x) {
    if constexpr (std::endian::native == std::endian::big)
        x = ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
    return x;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigurationError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigurationError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigurationError("failed writing " + p.string());
}

}  // namespace detail

/// Serialised (manifest, payload) pair; deterministic for equal checkpoints.
inline std::pair<std::string, std::string> encode_checkpoint(const Checkpoint& ck) {
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    for (const auto& [name, t] : ck.tensors) {
        tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", payload.size()}});
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            const std::uint32_t bits = detail::to_little_endian(std::bit_cast<std::uint32_t>(t.data()[i]));
            char b[4];
            std::memcpy(b, &bits, 4);
            payload.append(b, 4);
        }
    }
    nlohmann::json manifest{{"format_version", checkpoint_format_version},
                            {"dtype", "float32-le"},
                            {"config", ck.config},
                            {"seeds", ck.seeds},
                            {"vocabulary", ck.vocabulary},
                            {"tensors", std::move(tensors)},
                            {"payload_bytes", payload.size()}};
    return {manifest.dump(2) + "\n", std::move(payload)};
}

inline Checkpoint decode_checkpoint(const std::string& manifest_text, const std::string& payload) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(manifest_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
    try {
        if (m.at("format_version").get<int>() != checkpoint_format_version)
            throw ConfigurationError("unsupported checkpoint format version " + m.at("format_version").dump());
        if (m.at("payload_bytes").get<std::size_t>() != payload.size())
            throw ConfigurationError("checkpoint payload has " + std::to_string(payload.size()) + " bytes, manifest says " +
                                     m.at("payload_bytes").dump());
        Checkpoint ck;
        ck.config = m.at("config");
        ck.seeds = m.at("seeds");
        ck.vocabulary = m.at("vocabulary").get<std::vector<std::string>>();
        std::size_t expected_offset = 0;
        for (const auto& t : m.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<std::vector<long long>>();
            const auto offset = t.at("offset").get<std::size_t>();
            if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw ConfigurationError("tensor " + name + " has an invalid shape");
            const auto count = static_cast<std::size_t>(shape[0] * shape[1]);
            if (offset != expected_offset || offset + 4 * count > payload.size())
                throw ConfigurationError("tensor " + name + " does not fit the payload at offset " + std::to_string(offset));
            Mat<float> v(shape[0], shape[1]);
            for (std::size_t i = 0; i < count; ++i) {
                std::uint32_t bits;
                std::memcpy(&bits, payload.data() + offset + 4 * i, 4);
                v.data()[i] = std::bit_cast<float>(detail::to_little_endian(bits));
            }
            expected_offset = offset + 4 * count;
            ck.tensors.emplace_back(name, std::move(v));
        }
        if (expected_offset != payload.size()) throw ConfigurationError("checkpoint payload has trailing bytes");
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError(std::string("malformed checkpoint manifest: ") + e.what());
    }
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto [manifest, payload] = encode_checkpoint(ck);
    detail::write_file(dir / "manifest.json", manifest);
    detail::write_file(dir / "weights.bin", payload);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigurationError("checkpoint directory " + dir.string() + " does not exist");
    return decode_checkpoint(detail::read_file(dir / "manifest.json"), detail::read_file(dir / "weights.bin"));
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline nlohmann::json to_json(const TextEncoderConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"width", c.width},           {"layers", c.layers}, {"heads", c.heads},
            {"embed_dim", c.embed_dim},   {"max_length", c.max_length}, {"causal", c.causal}};
}

inline nlohmann::json to_json(const GraphEncoderConfig& c) {
    return {{"input_dim", c.input_dim}, {"hidden_dim", c.hidden_dim}, {"output_dim", c.output_dim}, {"leaky_slope", c.leaky_slope}};
}

template <typename State>
void append_tensors(Checkpoint& ck, State& state) {
    visit_parameters(state, [&](const std::string& name, auto& p) { ck.tensors.emplace_back(name, p.template cast<float>()); });
}

/// Copies named tensors into `state`, checking every shape against the
/// freshly initialised state.
template <typename State>
void restore_tensors(const Checkpoint& ck, State& state) {
    visit_parameters(state, [&](const std::string& name, auto& p) {
        const auto* t = ck.find(name);
        if (!t) throw ConfigurationError("checkpoint has no tensor " + name);
        if (t->rows() != p.rows() || t->cols() != p.cols())
            throw ConfigurationError("tensor " + name + " has shape [" + std::to_string(t->rows()) + ", " + std::to_string(t->cols()) +
                                     "], expected [" + std::to_string(p.rows()) + ", " + std::to_string(p.cols()) + "]");
        using S = typename std::decay_t<decltype(p)>::Scalar;
        p = t->template cast<S>();
    });
}

template <typename Scalar>
Checkpoint model_checkpoint(const Model<Scalar>& model, nlohmann::json run_config = nlohmann::json::object(),
                            nlohmann::json seeds = nlohmann::json::object()) {
    Checkpoint ck;
    ck.config = {{"text_encoder", to_json(model.text.config)}, {"graph_encoder", to_json(model.graph.config)}, {"run", std::move(run_config)}};
    ck.seeds = std::move(seeds);
    ck.vocabulary = model.vocab.words();
    auto text = model.text;
    auto graph = model.graph;
    append_tensors(ck, text);
    append_tensors(ck, graph);
    return ck;
}

template <typename Scalar>
Model<Scalar> model_from_checkpoint(const Checkpoint& ck) {
    try {
        const auto& tc = ck.config.at("text_encoder");
        const auto& gc = ck.config.at("graph_encoder");
        TextEncoderConfig t;
        t.vocab_size = tc.at("vocab_size").get<int>();
        t.width = tc.at("width").get<int>();
        t.layers = tc.at("layers").get<int>();
        t.heads = tc.at("heads").get<int>();
        t.embed_dim = tc.at("embed_dim").get<int>();
        t.max_length = tc.at("max_length").get<int>();
        t.causal = tc.at("causal").get<bool>();
        GraphEncoderConfig g;
        g.input_dim = gc.at("input_dim").get<int>();
        g.hidden_dim = gc.at("hidden_dim").get<int>();
        g.output_dim = gc.at("output_dim").get<int>();
        g.leaky_slope = gc.at("leaky_slope").get<double>();
        Model<Scalar> m{Vocabulary(ck.vocabulary), init_text_encoder<Scalar>(t, 0), init_graph_encoder<Scalar>(g, 0)};
        if (m.vocab.size() != t.vocab_size)
            throw ConfigurationError("vocabulary of " + std::to_string(m.vocab.size()) + " tokens does not match text.token_embedding rows " +
                                     std::to_string(t.vocab_size));
        restore_tensors(ck, m.text);
        restore_tensors(ck, m.graph);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError(std::string("checkpoint config is incomplete: ") + e.what());
    }
}

}  // namespace g2p2
