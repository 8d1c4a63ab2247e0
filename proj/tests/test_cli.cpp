// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs of the command-line tool.

#include <catch_amalgamated.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const fs::path root = fs::temp_directory_path() / "g2p2-cli-test";

int run(const std::string& args) {
    const std::string cmd = std::string("\"") + G2P2_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string path(const std::string& name) { return (root / name).string(); }

const std::string synth_flags = " --n-classes 3 --docs-per-class 10 --vocab-size 30 --keywords-per-class 3 --doc-length-min 3 --doc-length-max 6";
const std::string model_flags = " --d-in 4 --width 8 --layers 1 --heads 2 --embed-dim 4 --gcn-hidden 6 --max-length 12";
const std::string eval_flags = " --n-way 2 --k-shot 2 --seeds 1,2 --prompt-steps 3 --meta-hidden 3";

/// Synthetic corpus and one pre-trained checkpoint shared by the cases below.
void ensure_fixture() {
    static bool done = false;
    if (done) return;
    fs::remove_all(root);
    fs::create_directories(root);
    REQUIRE(run("synth --out " + path("corpus") + synth_flags) == 0);
    REQUIRE(run("pretrain --corpus " + path("corpus") + " --out " + path("pre") + model_flags + " --epochs 1 --batch-size 8 --lr 0.001") == 0);
    done = true;
}

}  // namespace

TEST_CASE("synth regenerates byte-identical corpora") {
    ensure_fixture();
    REQUIRE(run("synth --out " + path("corpus2") + synth_flags) == 0);
    for (const char* f : {"documents.jsonl", "edges.tsv", "classes.json"}) CHECK(slurp(root / "corpus" / f) == slurp(root / "corpus2" / f));
    REQUIRE(run("synth --out " + path("corpus3") + synth_flags + " --seed 2") == 0);
    CHECK(slurp(root / "corpus" / "documents.jsonl") != slurp(root / "corpus3" / "documents.jsonl"));
}

TEST_CASE("pretrain is reproducible") {
    ensure_fixture();
    REQUIRE(run("pretrain --corpus " + path("corpus") + " --out " + path("pre2") + model_flags + " --epochs 1 --batch-size 8 --lr 0.001") == 0);
    CHECK(slurp(root / "pre" / "losses.csv") == slurp(root / "pre2" / "losses.csv"));
    CHECK(slurp(root / "pre" / "checkpoint" / "weights.bin") == slurp(root / "pre2" / "checkpoint" / "weights.bin"));
    // Manifests differ only in the recorded output directory.
    auto ma = nlohmann::json::parse(slurp(root / "pre" / "checkpoint" / "manifest.json"));
    auto mb = nlohmann::json::parse(slurp(root / "pre2" / "checkpoint" / "manifest.json"));
    ma["config"]["run"].erase("out");
    mb["config"]["run"].erase("out");
    CHECK(ma == mb);
    const auto csv = slurp(root / "pre" / "losses.csv");
    CHECK(csv.rfind("epoch,batch,L1,L2,L3,total,exp_tau\n", 0) == 0);
    const auto manifest = nlohmann::json::parse(slurp(root / "pre" / "checkpoint" / "manifest.json"));
    CHECK(manifest["seeds"]["master"] == 1);
    CHECK(manifest["config"]["run"]["lr"] == 0.001);
}

TEST_CASE("evaluation commands write reports") {
    ensure_fixture();
    const std::string common = " --checkpoint " + path("pre") + "/checkpoint --corpus " + path("corpus") + eval_flags;
    for (const char* cmd : {"zeroshot", "fewshot", "conditional"}) {
        const auto out = path(std::string("ev-") + cmd);
        REQUIRE(run(std::string(cmd) + common + " --out " + out) == 0);
        const auto report = nlohmann::json::parse(slurp(fs::path(out) / "report.json"));
        CHECK(report["per_task"].size() == 2);
        CHECK(fs::exists(fs::path(out) / "report.txt"));
        // Same command, same report.
        REQUIRE(run(std::string(cmd) + common + " --out " + out + "-again") == 0);
        auto again = nlohmann::json::parse(slurp(fs::path(out + "-again") / "report.json"));
        auto first = report;
        first["config"].erase("out");
        again["config"].erase("out");
        CHECK(first == again);
    }
    REQUIRE(run("eval --method conditional --protocol base-unseen --n-base 1" + common + " --out " + path("ev-bu")) == 0);
    CHECK(nlohmann::json::parse(slurp(root / "ev-bu" / "report.json")).contains("base_unseen"));
}

TEST_CASE("meta-zero conditional reproduces the static report") {
    ensure_fixture();
    const std::string common = " --checkpoint " + path("pre") + "/checkpoint --corpus " + path("corpus") + eval_flags;
    REQUIRE(run("fewshot" + common + " --out " + path("mz-static")) == 0);
    REQUIRE(run("conditional --meta-zero true" + common + " --out " + path("mz-cond")) == 0);
    auto a = nlohmann::json::parse(slurp(root / "mz-static" / "report.json"));
    auto b = nlohmann::json::parse(slurp(root / "mz-cond" / "report.json"));
    for (auto* j : {&a, &b}) {
        j->erase("method");
        j->erase("config");
    }
    CHECK(a == b);
}

TEST_CASE("template files and config files") {
    ensure_fixture();
    {
        std::ofstream(root / "tmpl.txt") << "\n[CLASS]\n";
        std::ofstream(root / "cfg.json") << R"({"n_way": 2, "k_shot": 2, "seeds": [1], "template": "about [CLASS]"})";
    }
    const std::string base = " --checkpoint " + path("pre") + "/checkpoint --corpus " + path("corpus");
    REQUIRE(run("zeroshot --config " + path("cfg.json") + base + " --template-file " + path("tmpl.txt") + " --out " + path("tf")) == 0);
    const auto report = nlohmann::json::parse(slurp(root / "tf" / "report.json"));
    CHECK(report["config"]["template"] == "[CLASS]");
    CHECK(report["config"]["n_way"] == 2);
    CHECK(report["per_task"].size() == 1);
}

TEST_CASE("exit codes") {
    ensure_fixture();
    CHECK(run("--help") == 0);
    CHECK(run("") == 2);
    CHECK(run("synth --no-such-flag 1") == 2);
    CHECK(run("synth --eta abc") == 2);
    CHECK(run("fewshot --corpus " + path("corpus")) == 2);  // no checkpoint
    {
        std::ofstream(root / "bad.json") << R"({"unknown_key": 1})";
    }
    CHECK(run("synth --config " + path("bad.json")) == 2);
    fs::create_directories(root / "broken");
    fs::copy_file(root / "corpus" / "documents.jsonl", root / "broken" / "documents.jsonl", fs::copy_options::overwrite_existing);
    fs::copy_file(root / "corpus" / "classes.json", root / "broken" / "classes.json", fs::copy_options::overwrite_existing);
    {
        std::ofstream(root / "broken" / "edges.tsv") << "0\tx\n";
    }
    CHECK(run("pretrain --corpus " + path("broken") + " --out " + path("never") + model_flags) == 3);
    // Too few instances per class for the requested shots.
    CHECK(run("fewshot --checkpoint " + path("pre") + "/checkpoint --corpus " + path("corpus") + " --k-shot 20 --out " + path("never")) == 3);
    CHECK(run("pretrain --corpus " + path("corpus") + " --out " + path("blowup") + model_flags + " --epochs 3 --batch-size 8 --lr 1e30") == 4);
}
