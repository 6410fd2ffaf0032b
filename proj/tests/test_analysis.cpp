#include "doctest.h"

#include "cap/analysis.hpp"
#include "cap/synthdata.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

using namespace cap;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint64_t weights_scalar_count(const EncoderWeights& w) {
    std::uint64_t n = w.patch_proj.data.size() + w.patch_bias.data.size() + w.pos.data.size() +
                      w.cls.data.size() + w.lnf_gamma.data.size() + w.lnf_beta.data.size();
    for (const auto& l : w.layers)
        n += l.ln1_gamma.data.size() + l.ln1_beta.data.size() + l.wq.data.size() +
             l.wk.data.size() + l.wv.data.size() + l.wo.data.size() + l.bq.data.size() +
             l.bk.data.size() + l.bv.data.size() + l.bo.data.size() + l.ln2_gamma.data.size() +
             l.ln2_beta.data.size() + l.w1.data.size() + l.b1.data.size() + l.w2.data.size() +
             l.b2.data.size();
    return n;
}

} // namespace

TEST_CASE("mean pairwise channel cosine matches hand oracles") {
    Tensor same({2, 3}, {0.5, 0.5, 0.0, 0.5, 0.5, 0.0});
    CHECK(mean_pairwise_channel_cosine(same) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor ortho({2, 2}, {1.0, 0.0, 0.0, 1.0});
    CHECK(mean_pairwise_channel_cosine(ortho) == doctest::Approx(0.0).epsilon(1e-12));

    // {e1, e2, (e1+e2)/sqrt(2)}: pairs give 0, 1/sqrt(2), 1/sqrt(2);
    // mean = sqrt(2)/3 = 0.4714...
    const double h = 1.0 / std::sqrt(2.0);
    Tensor three({3, 2}, {1.0, 0.0, 0.0, 1.0, h, h});
    CHECK(mean_pairwise_channel_cosine(three) ==
          doctest::Approx(std::sqrt(2.0) / 3.0).epsilon(1e-12));
    CHECK(mean_pairwise_channel_cosine(three) == doctest::Approx(0.4714).epsilon(1e-4));
}

TEST_CASE("channel cosine is scale invariant and permutation symmetric") {
    Tensor v({3, 4}, {0.2, -1.0, 0.5, 0.3, 1.1, 0.4, -0.2, 0.6, -0.7, 0.1, 0.9, -0.4});
    const double base = mean_pairwise_channel_cosine(v);

    Tensor scaled = v;
    for (std::size_t k = 0; k < 4; ++k) scaled.data[k] *= 7.5;          // row 0
    for (std::size_t k = 8; k < 12; ++k) scaled.data[k] *= 0.003;       // row 2
    CHECK(mean_pairwise_channel_cosine(scaled) == doctest::Approx(base).epsilon(1e-12));

    Tensor permuted = Tensor::zeros({3, 4});
    const std::size_t perm[3] = {2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) permuted.data[i * 4 + k] = v.data[perm[i] * 4 + k];
    CHECK(mean_pairwise_channel_cosine(permuted) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("channel cosine rejects zero vectors and bad shapes") {
    CHECK_THROWS_AS(mean_pairwise_channel_cosine((Tensor({2, 2}, {0.0, 0.0, 1.0, 0.0}))),
                    std::invalid_argument);
    CHECK_THROWS_AS(mean_pairwise_channel_cosine((Tensor::zeros({1, 4}))), std::invalid_argument);
    CHECK_THROWS_AS(mean_pairwise_channel_cosine((Tensor::zeros({2, 2, 2}))), std::invalid_argument);
}

TEST_CASE("patch diversity ranks positions and drops the most similar") {
    // Channel 0 is (1, 0) everywhere; channel 1 at position p makes cosine
    // s_p = -0.9 + 0.1 p. With 16 positions and filter 0.75, the 4 least
    // similar (-0.9 .. -0.6) survive.
    const std::size_t n = 16;
    FeatureMap fm;
    fm.mode = Encoding::IFE;
    fm.patch = Tensor::zeros({2, n, 2});
    fm.cls = Tensor::zeros({2, 2});
    fm.cls.data = {1.0, 0.0, 1.0, 0.0};
    for (std::size_t p = 0; p < n; ++p) {
        const double s = -0.9 + 0.1 * static_cast<double>(p);
        fm.patch.at(0, p, 0) = 1.0;
        fm.patch.at(1, p, 0) = s;
        fm.patch.at(1, p, 1) = std::sqrt(1.0 - s * s);
    }
    CHECK(instance_diversity(fm, TokenSource::patch, 0.75) ==
          doctest::Approx(-0.75).epsilon(1e-12));
    // filter 0 keeps all 16: mean of the arithmetic series.
    CHECK(instance_diversity(fm, TokenSource::patch, 0.0) ==
          doctest::Approx((-0.9 + 0.6) / 2.0).epsilon(1e-12));
    CHECK(instance_diversity(fm, TokenSource::cls, 0.0) == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(instance_diversity(fm, TokenSource::patch, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(instance_diversity(fm, TokenSource::patch, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(instance_diversity(fm, TokenSource::patch, 1.5), std::invalid_argument);

    FeatureMap jfe = fm;
    jfe.mode = Encoding::JFE;
    jfe.cls = Tensor::zeros({1, 2});
    CHECK_THROWS_AS(instance_diversity(jfe, TokenSource::cls, 0.0), std::invalid_argument);
    CHECK_NOTHROW(instance_diversity(jfe, TokenSource::patch, 0.75));
}

TEST_CASE("identical channels give diversity exactly one") {
    FeatureMap fm;
    fm.mode = Encoding::IFE;
    fm.patch = Tensor::zeros({3, 4, 5});
    fm.cls = Tensor::zeros({3, 5});
    RngStream rng(5);
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t k = 0; k < 5; ++k) {
            const double v = rng.next_double() - 0.3;
            for (std::size_t c = 0; c < 3; ++c) fm.patch.at(c, p, k) = v;
        }
    for (std::size_t k = 0; k < 5; ++k) {
        const double v = rng.next_double() + 0.1;
        for (std::size_t c = 0; c < 3; ++c) fm.cls.data[c * 5 + k] = v;
    }
    CHECK(instance_diversity(fm, TokenSource::patch, 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(instance_diversity(fm, TokenSource::patch, 0.75) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(instance_diversity(fm, TokenSource::cls, 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("encoder flop model matches its documented formula") {
    EncoderConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8; // N = 16
    cfg.embed_dim = 64;
    cfg.depth = 4;

    const std::uint64_t d = 64, n = 16, c = 2;
    const std::uint64_t s_jfe = 1 + c * n, s_ife = 1 + n;
    auto layer_cost = [&](std::uint64_t s) {
        return 4 * s * d * d + 2 * s * s * d + 2 * s * d * (4 * d);
    };
    CHECK(encoder_flops(cfg, c, Encoding::JFE).flops == cfg.depth * layer_cost(s_jfe));
    CHECK(encoder_flops(cfg, c, Encoding::IFE).flops == c * cfg.depth * layer_cost(s_ife));

    // C = 1 collapses the two modes exactly.
    CHECK(encoder_flops(cfg, 1, Encoding::JFE).flops == encoder_flops(cfg, 1, Encoding::IFE).flops);
    CHECK(encoder_attention_quadratic_flops(cfg, 1, Encoding::JFE) ==
          encoder_attention_quadratic_flops(cfg, 1, Encoding::IFE));
}

TEST_CASE("quadratic attention term ratio approaches C at ViT scale") {
    EncoderConfig cfg;
    cfg.image_size = 56;
    cfg.patch_size = 4; // N = 196
    cfg.embed_dim = 384;
    cfg.depth = 12;
    cfg.heads = 4;
    cfg.max_sequence = 1u << 31;

    for (std::size_t c : {2ul, 4ul, 8ul, 16ul}) {
        const double ratio =
            static_cast<double>(encoder_attention_quadratic_flops(cfg, c, Encoding::JFE)) /
            static_cast<double>(encoder_attention_quadratic_flops(cfg, c, Encoding::IFE));
        const double exact = std::pow(1.0 + static_cast<double>(c) * 196.0, 2.0) /
                             (static_cast<double>(c) * 197.0 * 197.0);
        CHECK(ratio == doctest::Approx(exact).epsilon(1e-12));
        CHECK(std::abs(ratio - static_cast<double>(c)) / static_cast<double>(c) < 0.01);
    }
    // The paper-scale C=8 value.
    const double r8 = static_cast<double>(encoder_attention_quadratic_flops(cfg, 8, Encoding::JFE)) /
                      static_cast<double>(encoder_attention_quadratic_flops(cfg, 8, Encoding::IFE));
    CHECK(r8 == doctest::Approx(7.9291).epsilon(1e-3));
}

TEST_CASE("IFE quadratic term scales as N^2") {
    // Square patch grids cannot double N exactly, so the scaling is checked
    // at 4x: patch 4 on a 56 vs 112 image gives N = 196 vs 784.
    EncoderConfig small;
    small.image_size = 56;
    small.patch_size = 4;
    small.embed_dim = 64;
    EncoderConfig big = small;
    big.image_size = 112;
    big.max_sequence = 8192;
    const double ratio =
        static_cast<double>(encoder_attention_quadratic_flops(big, 3, Encoding::IFE)) /
        static_cast<double>(encoder_attention_quadratic_flops(small, 3, Encoding::IFE));
    CHECK(ratio == doctest::Approx(785.0 * 785.0 / (197.0 * 197.0)).epsilon(1e-12));
    CHECK(std::abs(ratio - 16.0) / 16.0 < 0.025);
}

TEST_CASE("JFE over IFE total flops grow monotonically in C from exactly one") {
    EncoderConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 4; // N = 64
    cfg.embed_dim = 96;
    cfg.depth = 6;
    cfg.max_sequence = 1u << 20;
    double prev = 0.0;
    for (std::size_t c = 1; c <= 16; ++c) {
        const double ratio = static_cast<double>(encoder_flops(cfg, c, Encoding::JFE).flops) /
                             static_cast<double>(encoder_flops(cfg, c, Encoding::IFE).flops);
        CHECK(ratio >= 1.0);
        if (c == 1) CHECK(ratio == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(ratio > prev);
        prev = ratio;
    }
}

TEST_CASE("encoder param closed form matches instantiated weights") {
    EncoderConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 4;
    // Hand total: patch 64*16+16, pos 5*16, cls 16, layers 2*(12*256+13*16),
    // final norm 32.
    CHECK(encoder_param_count(cfg) == 7728);
    CHECK(encoder_param_count(cfg) == weights_scalar_count(init_encoder(cfg)));

    EncoderConfig other;
    other.image_size = 32;
    other.patch_size = 8;
    other.embed_dim = 64;
    other.depth = 4;
    CHECK(encoder_param_count(other) == weights_scalar_count(init_encoder(other)));
}

TEST_CASE("pooler flop parity: DCP within 2% of JAP for every arch at paper scale") {
    const std::size_t c = 8, n = 196, d = 384;
    for (PoolArch arch : all_pool_archs()) {
        CostReport jap = pooler_flops(arch, PoolStrategy::JAP, c, n, d);
        CostReport dcp = pooler_flops(arch, PoolStrategy::DCP, c, n, d);
        const double rel = std::abs(static_cast<double>(dcp.flops) -
                                    static_cast<double>(jap.flops)) /
                           static_cast<double>(jap.flops);
        INFO("arch ", pool_arch_name(arch), " rel diff ", rel);
        CHECK(rel <= 0.02);
        CHECK(dcp.params == jap.params);
        CHECK(dcp.flops > jap.flops); // the extra C-row second stage
    }
}

TEST_CASE("mean pooler DCP/JAP ratio is exactly 1 + 1/N") {
    for (std::size_t n : {4ul, 16ul, 196ul}) {
        CostReport jap = pooler_flops(PoolArch::mean, PoolStrategy::JAP, 8, n, 64);
        CostReport dcp = pooler_flops(PoolArch::mean, PoolStrategy::DCP, 8, n, 64);
        // Integer identity avoids any floating comparison: dcp * n == jap * (n+1).
        CHECK(dcp.flops * n == jap.flops * (n + 1));
    }
}

TEST_CASE("pooler cost is exactly linear in the row count") {
    for (PoolArch arch : all_pool_archs()) {
        // DCP(C,N) decomposes as C single-channel JAP passes plus one C-row pass.
        CostReport dcp = pooler_flops(arch, PoolStrategy::DCP, 6, 49, 64);
        CostReport one = pooler_flops(arch, PoolStrategy::JAP, 1, 49, 64);
        CostReport second = pooler_flops(arch, PoolStrategy::JAP, 1, 6, 64);
        CHECK(dcp.flops == 6 * one.flops + second.flops);

        CostReport jap8 = pooler_flops(arch, PoolStrategy::JAP, 8, 49, 64);
        CostReport jap16 = pooler_flops(arch, PoolStrategy::JAP, 16, 49, 64);
        CHECK(jap16.flops == 2 * jap8.flops);
    }
}

TEST_CASE("pooler flop reports carry the shared parameter counts") {
    CHECK(pooler_flops(PoolArch::mhca, PoolStrategy::JAP, 8, 196, 64).params == 12544);
    CHECK(pooler_flops(PoolArch::mab, PoolStrategy::DCP, 8, 196, 64).params == 33536);
    CHECK(pooler_flops(PoolArch::mean, PoolStrategy::JAP, 8, 196, 64).params == 0);
}

TEST_CASE("figure CSVs have documented schemas and deterministic bodies") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "cap_analysis_csv";
    fs::create_directories(dir);

    std::vector<DiversityReport> div(2);
    div[0] = {"rho0", Encoding::IFE, TokenSource::cls, 0.0, 0.41, 1000};
    div[1] = {"rho1", Encoding::IFE, TokenSource::cls, 0.0, 0.99, 1000};
    const std::string fig2 = (dir / "fig2.csv").string();
    write_fig2_csv(fig2, div);
    CHECK(slurp(fig2) == "dataset,mean_sim,n_instances\n"
                         "rho0,0.41,1000\n"
                         "rho1,0.99,1000\n");

    div[0].source = TokenSource::patch;
    div[0].filter_fraction = 0.75;
    div[1] = {"rho0", Encoding::JFE, TokenSource::patch, 0.75, 0.67, 1000};
    const std::string fig5 = (dir / "fig5.csv").string();
    write_fig5_csv(fig5, div);
    CHECK(slurp(fig5) == "dataset,encoding,filter_fraction,mean_sim,n_instances\n"
                         "rho0,ife,0.75,0.41,1000\n"
                         "rho0,jfe,0.75,0.67,1000\n");

    std::vector<CostReport> costs;
    costs.push_back(pooler_flops(PoolArch::mean, PoolStrategy::JAP, 2, 4, 8));
    costs.push_back(pooler_flops(PoolArch::mean, PoolStrategy::DCP, 2, 4, 8));
    const std::string fig6 = (dir / "fig6.csv").string();
    write_fig6_csv(fig6, costs);
    CHECK(slurp(fig6) == "arch,strategy,C,N,flops\n"
                         "mean,JAP,2,4,64\n"
                         "mean,DCP,2,4,80\n");

    write_fig6_csv(fig6, {});
    CHECK(slurp(fig6) == "arch,strategy,C,N,flops\n");
}

TEST_CASE("spearman rank correlation handles monotone and tied data") {
    CHECK(spearman({1, 2, 3, 4, 5}, {10, 20, 30, 40, 50}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    // Nonlinear but monotone is still exactly 1.
    CHECK(spearman({0, 0.25, 0.5, 0.75, 1.0}, {0.1, 0.2, 0.5, 0.9, 0.99}) == doctest::Approx(1.0));
    // One tie in an otherwise increasing series stays >= 0.9.
    CHECK(spearman({1, 2, 3, 4, 5}, {1, 2, 2, 4, 5}) >= 0.9);
    CHECK_THROWS_AS(spearman({1, 2}, {1}), std::invalid_argument);
    CHECK_THROWS_AS(spearman({1}, {1}), std::invalid_argument);
    CHECK_THROWS_AS(spearman({1, 2, 3}, {7, 7, 7}), std::invalid_argument);
}

TEST_CASE("directional diversity on synthetic data: rho=1 saturates, rho=0 separates") {
    // Small frozen encoder; the acceptance gate repeats this at 1000
    // instances. Everything is seeded, so the inequality is reproducible.
    EncoderConfig ecfg;
    ecfg.image_size = 16;
    ecfg.patch_size = 4; // N = 16
    ecfg.embed_dim = 32;
    ecfg.depth = 2;
    ecfg.heads = 4;
    ecfg.init_seed = 7;
    EncoderWeights w = init_encoder(ecfg);

    GeneratorConfig g1;
    g1.channels = 3;
    g1.image_size = 16;
    g1.redundancy = 1.0;
    g1.seed = 101;
    GeneratorConfig g0 = g1;
    g0.redundancy = 0.0;
    g0.seed = 102;

    const std::size_t n_inst = 30;
    double ife_r1 = 0, jfe_r1 = 0, ife_r0 = 0, jfe_r0 = 0;
    for (std::size_t i = 0; i < n_inst; ++i) {
        TokenBatch t1 = tokenize(generate_sample(g1, i), w);
        ife_r1 += instance_diversity(encode_ife(t1, w), TokenSource::patch, 0.75);
        jfe_r1 += instance_diversity(encode_jfe(t1, w), TokenSource::patch, 0.75);
        TokenBatch t0 = tokenize(generate_sample(g0, i), w);
        ife_r0 += instance_diversity(encode_ife(t0, w), TokenSource::patch, 0.75);
        jfe_r0 += instance_diversity(encode_jfe(t0, w), TokenSource::patch, 0.75);
    }
    ife_r1 /= n_inst, jfe_r1 /= n_inst, ife_r0 /= n_inst, jfe_r0 /= n_inst;
    INFO("rho1 IFE ", ife_r1, " JFE ", jfe_r1, "; rho0 IFE ", ife_r0, " JFE ", jfe_r0);

    // Pixel-identical channels are feature-identical under both encodings.
    CHECK(ife_r1 > 0.95);
    CHECK(jfe_r1 > 0.95);
    CHECK(ife_r1 == doctest::Approx(1.0).epsilon(1e-9));
    // Independent channels: joint attention homogenizes, independent
    // encoding preserves distinctness.
    CHECK(ife_r0 < jfe_r0);
}
