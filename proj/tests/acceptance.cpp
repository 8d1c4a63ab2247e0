// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Tolerances and
// thresholds are fixed below.
//
//   acceptance [--quick] [--strict] [--report FILE]
//
// --quick skips the end-to-end criteria, --strict exits nonzero when any
// criterion fails, --report also writes the lines to FILE.

#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace g2p2;
using namespace g2p2::testing;
using RowD = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double analytic_tol = 1e-9;
constexpr double gradient_rel_tol = 1e-4;
constexpr double invariance_tol = 1e-6;
constexpr double symmetry_tol = 1e-9;
constexpr double zero_meta_tol = 1e-12;
constexpr int property_trials = 100;
constexpr double fewshot_min = 0.90;
constexpr double zeroshot_min = 0.70;
constexpr double e2e_budget_s = 600.0;
constexpr double epoch_ratio_lo = 3.0, epoch_ratio_hi = 5.0;

// Pre-training used by the end-to-end criteria. The reference learning rate
// of 2e-5 is tuned for a large pre-trained transformer; the small encoders
// here are trained from scratch and need a larger step.
constexpr double desk_lr = 1e-3;
constexpr int desk_epochs = 2;

std::vector<std::string> failed;
std::string transcript;

void emit(const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    transcript += line;
}

void report(const std::string& id, bool ok, const std::string& detail) {
    if (!ok) failed.push_back(id);
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s  %-4s %s\n", ok ? "PASS" : "FAIL", id.c_str(), detail.c_str());
    emit(buf);
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, static_cast<double>(args)...);
    return buf;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

MatD rnd(Eigen::Index r, Eigen::Index c, Rng& rng) { return random_normal<double>(r, c, 1.0, rng); }

double total_loss(const MatD& t, const MatD& z, const MatD& s, double tau, double lambda) {
    return pretrain_total_loss(ad::constant(t), ad::constant(z), ad::constant(s), ad::constant<double>(MatD::Constant(1, 1, tau)), lambda).total.item();
}

// ---------------------------------------------------------------------------

void analytic_losses() {
    MatD eye = MatD::Identity(2, 2);
    const double a = npair_contrastive_loss(eye);
    const double b = npair_contrastive_loss(MatD(MatD::Constant(2, 2, 1.0)));
    MatD A(2, 2), B(2, 2), want(2, 2);
    A << 1, 0, 0, 1;
    B << 0.6, 0.8, 1, 0;
    want << 1.2, 2.0, 1.6, 0.0;
    const double c = (similarity_matrix<double>(A, B, std::log(2.0)) - want).cwiseAbs().maxCoeff();
    const double ea = std::abs(a - std::log1p(std::exp(-1.0))), eb = std::abs(b - std::log(2.0));
    report("1", ea < analytic_tol && eb < analytic_tol && c < analytic_tol,
           fmt("analytic losses: |err| identity %.1e, uniform %.1e, similarity %.1e (tol 1e-9)", ea, eb, c));
}

void gradients() {
    Rng rng(2024);
    double worst_pre = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        MatD t = rnd(4, 3, rng), z = rnd(4, 3, rng), s = rnd(4, 3, rng), tau = MatD::Constant(1, 1, 0.3 + rng.uniform());
        auto vt = ad::variable(t), vz = ad::variable(z), vs = ad::variable(s), vtau = ad::variable(tau);
        ad::backward(pretrain_total_loss(vt, vz, vs, vtau, 0.1).total);
        auto f = [&] { return total_loss(t, z, s, tau(0, 0), 0.1); };
        for (auto [an, p] : {std::pair{vt.grad(), &t}, std::pair{vz.grad(), &z}, std::pair{vs.grad(), &s}, std::pair{vtau.grad(), &tau}})
            worst_pre = std::max(worst_pre, relative_error(an, numeric_gradient(p, f)));
    }

    const auto corpus = tiny_corpus();
    const Vocabulary vocab(corpus_words(corpus));
    const auto text = micro_text_encoder(vocab.size(), 5);
    const std::vector<ClassId> classes{0, 1, 2};
    const MatD z_all = rnd(static_cast<Eigen::Index>(corpus.size()), 3, rng);
    const auto support = make_labeled_set(z_all, {{0, 0}, {2, 1}, {3, 1}, {4, 2}}, classes);
    double worst_prompt = 0.0, worst_meta = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto prompt = make_prompt_state(text, vocab, init_prompt_random(text, 3, seed), corpus.class_texts);
        MatD h = prompt.tokens;
        auto hv = ad::variable(h);
        ad::backward(static_prompt_loss(text, hv, prompt, classes, support));
        auto fs = [&] { return static_prompt_loss(text, ad::constant(h), prompt, classes, support).item(); };
        worst_prompt = std::max(worst_prompt, relative_error(hv.grad(), numeric_gradient(&h, fs)));

        MetaNetState<double> meta{rnd(3, 4, rng), 0.5 * rnd(1, 4, rng), rnd(4, 4, rng), 0.5 * rnd(1, 4, rng)};
        MatD h2 = prompt.tokens;
        ParamBinder<double> bind(true);
        auto hv2 = ad::variable(h2);
        ad::backward(conditional_prompt_loss(text, bind, hv2, prompt, meta, classes, support));
        auto fc = [&] {
            ParamBinder<double> frozen(false);
            return conditional_prompt_loss(text, frozen, ad::constant(h2), prompt, meta, classes, support).item();
        };
        worst_meta = std::max(worst_meta, relative_error(hv2.grad(), numeric_gradient(&h2, fc)));
        visit_parameters(meta, [&](const std::string&, MatD& p) { worst_meta = std::max(worst_meta, relative_error(bind.grad(p), numeric_gradient(&p, fc))); });
    }
    report("2", worst_pre < gradient_rel_tol && worst_prompt < gradient_rel_tol && worst_meta < gradient_rel_tol,
           fmt("finite differences: max rel err pre-training %.1e, prompt %.1e, meta-net %.1e (tol 1e-4)", worst_pre, worst_prompt, worst_meta));
}

void invariances() {
    Rng rng(77);
    double perm = 0.0, sym = 0.0, scale = 0.0;
    int argmax_flips = 0;
    for (int trial = 0; trial < property_trials; ++trial) {
        const auto n = static_cast<Eigen::Index>(2 + rng.below(6)), d = static_cast<Eigen::Index>(2 + rng.below(5));
        const MatD t = rnd(n, d, rng), z = rnd(n, d, rng), s = rnd(n, d, rng);
        std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        rng.shuffle(order);
        MatD tp(n, d), zp(n, d), sp(n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            tp.row(i) = t.row(order[static_cast<std::size_t>(i)]);
            zp.row(i) = z.row(order[static_cast<std::size_t>(i)]);
            sp.row(i) = s.row(order[static_cast<std::size_t>(i)]);
        }
        const double tau = 2.0 * rng.uniform();
        perm = std::max(perm, std::abs(total_loss(t, z, s, tau, 0.1) - total_loss(tp, zp, sp, tau, 0.1)));

        const MatD l = 3.0 * rnd(n, n, rng);
        sym = std::max(sym, std::abs(npair_contrastive_loss(l) - npair_contrastive_loss(MatD(l.transpose()))));

        MatD t2 = t;
        for (Eigen::Index i = 0; i < n; ++i) t2.row(i) *= std::exp(8.0 * rng.uniform() - 4.0);
        scale = std::max(scale, (similarity_matrix<double>(t, z, tau) - similarity_matrix<double>(t2, z, tau)).cwiseAbs().maxCoeff());

        const MatD w = rnd(n, d, rng);
        const RowD zr = z.row(0);
        const RowD zc = std::exp(8.0 * rng.uniform() - 4.0) * zr;
        argmax_flips += predict(classify(zr, w)) != predict(classify(zc, w));
    }
    report("3", perm < invariance_tol && sym < symmetry_tol && scale < invariance_tol && argmax_flips == 0,
           fmt("%.0f random instances: permutation %.1e, transpose %.1e, cosine scale %.1e, argmax flips %.0f", property_trials, perm, sym, scale,
               argmax_flips));
}

void zero_meta_reduction() {
    Rng rng(3);
    const auto corpus = tiny_corpus();
    const Vocabulary vocab(corpus_words(corpus));
    TextEncoderConfig tc;
    tc.vocab_size = vocab.size();
    auto text = init_text_encoder<double>(tc, 9);
    const auto prompt = make_prompt_state(text, vocab, init_prompt_random(text, 4, 1), corpus.class_texts);
    const auto meta = zero_meta_net<double>(tc.embed_dim, 8, tc.width);
    const MatD z = rnd(20, tc.embed_dim, rng);
    const std::vector<ClassId> classes{0, 1, 2};
    bool inputs_equal = true;
    for (Eigen::Index i = 0; i < z.rows(); ++i) inputs_equal = inputs_equal && conditional_prompt_tokens(prompt, meta, RowD(z.row(i))) == prompt.tokens;
    const double diff = (classify_conditional_rows(text, prompt, meta, z, classes) - classify_rows(z, class_weights_continuous(text, prompt, classes)))
                            .cwiseAbs()
                            .maxCoeff();
    report("4", inputs_equal && diff <= zero_meta_tol,
           std::string("zero meta-net: encoder inputs ") + (inputs_equal ? "identical" : "differ") + fmt(", max |dp| %.1e (tol 1e-12)", diff));
}

void parameter_counts() {
    const auto p = prompt_parameter_count(4, 512);
    const auto total = p + meta_net_parameter_count(128, 8, 512);
    report("5", p == 2048 && total == 7688, fmt("parameters at d=128, width=512, M=4, hidden=8: prompts %.0f, prompts + meta-net %.0f", double(p), double(total)));
}

// ---------------------------------------------------------------------------
// End-to-end

struct Trained {
    GraphTextCorpus corpus;
    Model<float> model;
    double seconds = 0.0;
};

Trained pretrain_on(const SyntheticCorpusConfig& sc, std::uint64_t seed, double l1_weight = 1.0, double lambda = 0.1) {
    const auto start = Clock::now();
    Trained out;
    out.corpus = generate_synthetic_corpus(sc);
    out.model.vocab = Vocabulary(corpus_words(out.corpus));
    TextEncoderConfig tc;
    tc.vocab_size = out.model.vocab.size();
    PretrainConfig pc;
    pc.epochs = desk_epochs;
    pc.learning_rate = desk_lr;
    pc.seed = seed;
    pc.l1_weight = l1_weight;
    pc.lambda = lambda;
    auto r = pretrain(out.corpus, out.model.vocab, init_text_encoder<float>(tc, seed), init_graph_encoder<float>(GraphEncoderConfig{}, seed), pc);
    out.model.text = std::move(r.text);
    out.model.graph = std::move(r.graph);
    out.seconds = seconds_since(start);
    return out;
}

std::uint64_t model_hash(Model<float> m) {
    std::uint64_t h = 1;
    visit_parameters(m.text, [&](const std::string&, Mat<float>& p) { h = hash_matrix(p, h); });
    visit_parameters(m.graph, [&](const std::string&, Mat<float>& p) { h = hash_matrix(p, h); });
    return h;
}

void standard_accuracy(const Trained& t, double* elapsed) {
    const auto start = Clock::now();
    const ProtocolConfig cfg;
    const auto few = run_protocol(SplitMode::standard, t.model, t.corpus, Method::fewshot_static, cfg);
    const auto zero = run_protocol(SplitMode::standard, t.model, t.corpus, Method::zero_discrete, cfg);
    *elapsed = t.seconds + seconds_since(start);
    report("6", few.accuracy.mean >= fewshot_min && zero.accuracy.mean >= zeroshot_min && *elapsed <= e2e_budget_s,
           fmt("synthetic 5-way: 5-shot %.4f (>= 0.90), zero-shot %.4f (>= 0.70), %.0f s end to end (<= 600)", few.accuracy.mean, zero.accuracy.mean,
               *elapsed));
}

void ablation() {
    double full = 0.0, l1 = 0.0, l23 = 0.0;
    const std::vector<std::uint64_t> seeds{1, 2, 4, 8, 16};
    for (auto s : seeds) {
        SyntheticCorpusConfig sc;
        sc.seed = s;
        ProtocolConfig cfg;
        cfg.seeds = {s};
        cfg.tasks_per_seed = 2;
        auto score = [&](double w1, double lambda) {
            const auto t = pretrain_on(sc, s, w1, lambda);
            return run_protocol(SplitMode::standard, t.model, t.corpus, Method::fewshot_static, cfg).accuracy.mean / static_cast<double>(seeds.size());
        };
        full += score(1.0, 0.1);
        l1 += score(1.0, 0.0);
        l23 += score(0.0, 1.0);
    }
    report("7", l1 >= l23 && full >= l1, fmt("ablation over 5 seeds, 5-shot: full %.4f >= text-node only %.4f >= summary terms only %.4f", full, l1, l23));
}

void context_init(const Trained& t) {
    ProtocolConfig cfg;
    cfg.tasks_per_seed = 2;
    const auto ctx = run_protocol(SplitMode::standard, t.model, t.corpus, Method::fewshot_static, cfg);
    cfg.context_init = false;
    const auto rnd_init = run_protocol(SplitMode::standard, t.model, t.corpus, Method::fewshot_static, cfg);
    report("8", ctx.accuracy.mean >= rnd_init.accuracy.mean,
           fmt("prompt init over %.0f tasks: context %.4f >= random %.4f", double(ctx.per_task.size()), ctx.accuracy.mean, rnd_init.accuracy.mean));
}

void base_unseen() {
    // Ten classes; the unseen half has sparser keywords than the base half.
    SyntheticCorpusConfig sc;
    sc.n_classes = 10;
    sc.docs_per_class = 100;
    for (int c = 0; c < 10; ++c) sc.class_keyword_rate.push_back(c < 5 ? 0.3 : 0.1);
    const auto t = pretrain_on(sc, 1);
    ProtocolConfig cfg;
    cfg.base_classes = {0, 1, 2, 3, 4};
    const auto st = run_protocol(SplitMode::base_unseen, t.model, t.corpus, Method::fewshot_static, cfg);
    const auto co = run_protocol(SplitMode::base_unseen, t.model, t.corpus, Method::conditional, cfg);
    report("9a", co.base_unseen->hm >= st.base_unseen->hm,
           fmt("base/unseen HM over 5 seeds: conditional %.4f >= static %.4f (unseen %.4f vs %.4f)", co.base_unseen->hm, st.base_unseen->hm,
               co.base_unseen->unseen, st.base_unseen->unseen));
    report("9b", st.base_unseen->base >= st.base_unseen->unseen,
           fmt("static prompts: base %.4f >= unseen %.4f", st.base_unseen->base, st.base_unseen->unseen));
}

void epoch_scaling() {
    auto epoch_seconds = [](int per_class) {
        SyntheticCorpusConfig sc;
        sc.docs_per_class = per_class;
        const auto corpus = generate_synthetic_corpus(sc);
        const Vocabulary vocab(corpus_words(corpus));
        TextEncoderConfig tc;
        tc.vocab_size = vocab.size();
        PretrainConfig pc;
        pc.epochs = 1;
        pc.learning_rate = desk_lr;
        double best = 1e300;
        for (int rep = 0; rep < 3; ++rep) {
            const auto start = Clock::now();
            pretrain(corpus, vocab, init_text_encoder<float>(tc, 1), init_graph_encoder<float>(GraphEncoderConfig{}, 1), pc);
            best = std::min(best, seconds_since(start));
        }
        return best;
    };
    const double small = epoch_seconds(200), large = epoch_seconds(800);
    const double ratio = large / small;
    report("10", ratio >= epoch_ratio_lo && ratio <= epoch_ratio_hi,
           fmt("epoch time |D|=1000 %.2f s, |D|=4000 %.2f s, ratio %.2f (in [3, 5])", small, large, ratio));
}

void engineering(const Trained& t) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "g2p2-acceptance";
    fs::remove_all(dir);
    save_checkpoint(model_checkpoint(t.model), dir / "a");
    save_checkpoint(load_checkpoint(dir / "a"), dir / "b");
    auto bytes = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    const bool ck = bytes(dir / "a" / "manifest.json") == bytes(dir / "b" / "manifest.json") &&
                    bytes(dir / "a" / "weights.bin") == bytes(dir / "b" / "weights.bin");

    SyntheticCorpusConfig sc;
    sc.docs_per_class = 20;
    const auto r1 = pretrain_on(sc, 3), r2 = pretrain_on(sc, 3);
    ProtocolConfig cfg;
    cfg.seeds = {1, 2};
    const bool reproducible = model_hash(r1.model) == model_hash(r2.model) &&
                              to_json(run_protocol(SplitMode::standard, r1.model, r1.corpus, Method::conditional, cfg)) ==
                                  to_json(run_protocol(SplitMode::standard, r2.model, r2.corpus, Method::conditional, cfg));

    const auto before = model_hash(t.model);
    run_protocol(SplitMode::standard, t.model, t.corpus, Method::fewshot_static, cfg);
    run_protocol(SplitMode::standard, t.model, t.corpus, Method::conditional, cfg);
    const bool frozen = model_hash(t.model) == before;
    report("11", ck && reproducible && frozen,
           std::string("checkpoint round trip ") + (ck ? "byte-identical" : "differs") + ", reruns " + (reproducible ? "identical" : "differ") +
               ", encoders after tuning " + (frozen ? "unchanged" : "changed"));
    fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
    bool quick = false, strict = false;
    std::string report_path;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--quick") quick = true;
        else if (a == "--strict") strict = true;
        else if (a == "--report" && i + 1 < argc) report_path = argv[++i];
        else {
            std::fprintf(stderr, "usage: acceptance [--quick] [--strict] [--report FILE]\n");
            return 2;
        }
    }
    const auto start = Clock::now();
    analytic_losses();
    gradients();
    invariances();
    zero_meta_reduction();
    parameter_counts();
    if (!quick) {
        const auto desk = pretrain_on(SyntheticCorpusConfig{}, 1);
        double e2e = 0.0;
        standard_accuracy(desk, &e2e);
        ablation();
        context_init(desk);
        base_unseen();
        epoch_scaling();
        engineering(desk);
    }
    std::string summary = std::to_string(failed.size()) + " criteria failed";
    for (std::size_t i = 0; i < failed.size(); ++i) summary += (i ? ", " : ": ") + failed[i];
    emit(summary + fmt("; %.0f s\n", seconds_since(start)));
    if (!report_path.empty()) std::ofstream(report_path) << transcript;
    return strict && !failed.empty() ? 1 : 0;
}
