// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <catch_amalgamated.hpp>

using namespace g2p2;
using nlohmann::json;

TEST_CASE("defaults carry the reference hyperparameters") {
    const auto d = default_run_config();
    CHECK(d["lambda"] == 0.1);
    CHECK(d["eta"] == 3);
    CHECK(d["prompt_length"] == 4);
    CHECK(d["prompt_lr"] == 0.01);
    CHECK(d["lr"] == 2e-5);
    CHECK(d["epochs"] == 2);
    CHECK(d["meta_hidden"] == 8);
    CHECK(d["max_length"] == 128);
    const auto p = pretrain_config(d);
    CHECK(p.batch_size == 64);
    CHECK(protocol_config(d).seeds == std::vector<std::uint64_t>{1, 2, 4, 8, 16});
}

TEST_CASE("flags override the file, which overrides defaults") {
    auto cfg = merge_run_config(default_run_config(), json{{"eta", 5}, {"lr", 0.001}}, "file");
    cfg = merge_run_config(cfg, json{{"eta", 7}}, "command line");
    CHECK(cfg["eta"] == 7);
    CHECK(cfg["lr"] == 0.001);
    CHECK(cfg["lambda"] == 0.1);
}

TEST_CASE("unknown keys and wrong types are configuration errors") {
    CHECK_THROWS_AS(merge_run_config(default_run_config(), json{{"etaa", 1}}, "f"), ConfigurationError);
    CHECK_THROWS_AS(merge_run_config(default_run_config(), json{{"eta", "three"}}, "f"), ConfigurationError);
    CHECK_THROWS_AS(merge_run_config(default_run_config(), json{{"eta", 1.5}}, "f"), ConfigurationError);
    CHECK_THROWS_AS(merge_run_config(default_run_config(), json::array(), "f"), ConfigurationError);
    // Integers are accepted where a real is expected.
    CHECK(merge_run_config(default_run_config(), json{{"lambda", 1}}, "f")["lambda"] == 1);
    try {
        merge_run_config(default_run_config(), json{{"bogus", 1}}, "run.json");
    } catch (const ConfigurationError& e) {
        CHECK(std::string(e.what()).find("run.json") != std::string::npos);
        CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
}

TEST_CASE("flag values parse to the default's type") {
    CHECK(parse_flag_value("eta", "4") == 4);
    CHECK(parse_flag_value("lr", "1e-3") == 1e-3);
    CHECK(parse_flag_value("meta_zero", "true") == true);
    CHECK(parse_flag_value("template", "a [CLASS]") == "a [CLASS]");
    CHECK(parse_flag_value("seeds", "1,2,3") == json{1, 2, 3});
    CHECK(parse_flag_value("class_keyword_rate", "0.3,0.1") == json{0.3, 0.1});
    CHECK_THROWS_AS(parse_flag_value("eta", "4x"), ConfigurationError);
    CHECK_THROWS_AS(parse_flag_value("meta_zero", "yes"), ConfigurationError);
    CHECK_THROWS_AS(parse_flag_value("nope", "1"), ConfigurationError);
    CHECK(flag_name("prompt_lr") == "prompt-lr");
}

TEST_CASE("typed views read the merged config") {
    auto cfg = merge_run_config(default_run_config(), json{{"width", 16}, {"embed_dim", 8}, {"d_in", 6}, {"seeds", {3}}}, "f");
    const auto t = text_encoder_config(cfg, 50);
    CHECK(t.vocab_size == 50);
    CHECK(t.width == 16);
    const auto g = graph_encoder_config(cfg);
    CHECK(g.input_dim == 6);
    CHECK(g.output_dim == 8);
    CHECK(protocol_config(cfg).seeds == std::vector<std::uint64_t>{3});
    CHECK(synthetic_config(cfg).feature_dim == 6);
    cfg["seeds"] = json::array();
    CHECK_THROWS_AS(protocol_config(cfg), ConfigurationError);
}

TEST_CASE("required paths") {
    auto cfg = default_run_config();
    CHECK_THROWS_AS(require_path(cfg, "corpus"), ConfigurationError);
    cfg["corpus"] = "/definitely/not/here";
    CHECK_THROWS_AS(require_path(cfg, "corpus"), ConfigurationError);
    CHECK_THROWS_AS(read_config_file("/definitely/not/here.json"), ConfigurationError);
}
