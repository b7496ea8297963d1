#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"
#include "kv2ct/training.hpp"

using namespace kv2ct;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.input_hw = {8, 8};
    c.patch_size = 2;
    c.embed_dim = 4;
    c.encoder_depths = {1};
    c.decoder_depths = {1};
    c.encoder_heads = {2};
    c.decoder_heads = {2};
    c.window_size = 2;
    c.mlp_ratio = 2.0;
    c.out_depth = 3;
    c.out_patch = 1;
    return c;
}

TrainingPair make_pair(const ModelConfig& c, int variant) {
    TrainingPair p;
    p.model_tag = c.model_tag;
    p.kv_ap = Image2D(c.input_hw[1], c.input_hw[0], 1.0, 1.0);
    p.kv_lat = p.kv_ap;
    for (int v = 0; v < c.input_hw[0]; ++v)
        for (int u = 0; u < c.input_hw[1]; ++u) {
            p.kv_ap.at(u, v) = float(2.0 + std::sin(0.3 * u + variant) * std::cos(0.2 * v));
            p.kv_lat.at(u, v) = float(2.0 + std::cos(0.25 * u) * std::sin(0.15 * v + variant));
        }
    const auto od = c.output_dims();
    p.ct = Volume3D(od, {2, 2, 2}, {0, 0, 0}, "HU");
    for (int z = 0; z < od[2]; ++z)
        for (int y = 0; y < od[1]; ++y)
            for (int x = 0; x < od[0]; ++x)
                p.ct.at(x, y, z) =
                    float(40.0 + 300.0 * std::sin(0.5 * x + 0.3 * y + 0.2 * z + variant));
    return p;
}

TrainConfig quick_cfg() {
    TrainConfig t;
    t.epochs = 5;
    t.batch_size = 1;
    t.warmup_epochs = 1;
    t.lr_peak = 1e-3;
    t.seed = 11;
    return t;
}

std::filesystem::path temp_stem(const char* tag) {
    return std::filesystem::temp_directory_path() / (std::string("kv2ct_train_test_") + tag);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("config validation") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    t.warmup_epochs = t.epochs;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.beta1 = 0.999;
    t.beta2 = 0.9;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.beta2 = 1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.smooth_l1_beta = 0.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.epochs = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("smooth L1 matches hand values") {
    std::vector<double> a{1.0, 2.0, 3.0}, b{1.0, 2.0, 3.0};
    CHECK(smooth_l1(a, b, 1.0) == 0.0);

    // Continuity at the knee: both branch formulas give 0.5*beta.
    const double beta = 0.7;
    std::vector<double> p{beta}, t{0.0};
    CHECK(smooth_l1(p, t, beta) == doctest::Approx(0.5 * beta).epsilon(1e-12));
    CHECK(0.5 * beta * beta / beta == doctest::Approx(beta - 0.5 * beta));

    CHECK(smooth_l1(std::vector<double>{3.0}, std::vector<double>{0.0}, 1.0) ==
          doctest::Approx(2.5).epsilon(1e-12));
    CHECK(smooth_l1(std::vector<double>{0.5}, std::vector<double>{0.0}, 1.0) ==
          doctest::Approx(0.125).epsilon(1e-12));
    // Mean over elements: one quadratic (0.125) + one linear (2.5) term.
    CHECK(smooth_l1(std::vector<double>{0.5, -3.0}, std::vector<double>{0.0, 0.0}, 1.0) ==
          doctest::Approx(0.5 * (0.125 + 2.5)).epsilon(1e-12));

    CHECK_THROWS_AS(smooth_l1(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 1.0),
                    ShapeError);

    Volume3D va({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, "HU");
    Volume3D vb = va;
    vb.data[3] = 3.0f;
    CHECK(smooth_l1(va, vb, 1.0) == doctest::Approx(2.5 / 8.0).epsilon(1e-12));
    Volume3D vc({2, 2, 1}, {1, 1, 1}, {0, 0, 0}, "HU");
    CHECK_THROWS_AS(smooth_l1(va, vc, 1.0), ShapeError);
}

TEST_CASE("smooth L1 gradient agrees with finite differences including the knee") {
    const double beta = 1.0, h = 1e-7;
    for (double e : {-2.5, -1.0 - 1e-6, -0.999999, -0.3, 0.0, 0.4, 0.999999, 1.0 + 1e-6, 2.0}) {
        std::vector<double> p{e, -0.2}, t{0.0, 0.0}, g;
        smooth_l1(p, t, beta, &g);
        auto at = [&](double x) {
            std::vector<double> q{x, -0.2};
            return smooth_l1(q, t, beta);
        };
        const double fd = (at(e + h) - at(e - h)) / (2 * h);
        CHECK(g[0] == doctest::Approx(fd).epsilon(1e-4));
    }
    // Gradient continuity across the knee.
    std::vector<double> t{0.0}, g1, g2;
    std::vector<double> lo{1.0 - 1e-9}, hi{1.0 + 1e-9};
    smooth_l1(lo, t, beta, &g1);
    smooth_l1(hi, t, beta, &g2);
    CHECK(std::abs(g1[0] - g2[0]) < 1e-8);
}

TEST_CASE("learning rate schedule closed forms") {
    TrainConfig t;
    t.epochs = 100;
    t.warmup_epochs = 20;
    t.lr_init = 1e-7;
    t.lr_peak = 5e-4;
    CHECK(lr_schedule(0, t) == t.lr_init);
    CHECK(lr_schedule(20, t) == doctest::Approx(t.lr_peak).epsilon(1e-15));
    CHECK(lr_schedule(10, t) ==
          doctest::Approx(t.lr_init + (t.lr_peak - t.lr_init) * 0.5).epsilon(1e-12));
    // Midpoint of the cosine leg: epoch 60 -> t=0.5 -> lr_peak/2.
    CHECK(lr_schedule(60, t) == doctest::Approx(t.lr_peak * 0.5).epsilon(1e-12));

    TrainConfig s;
    s.epochs = 2;
    s.warmup_epochs = 0;
    s.lr_peak = 8e-4;
    CHECK(lr_schedule(1, s) == doctest::Approx(0.5 * s.lr_peak).epsilon(1e-12));
    CHECK(lr_schedule(0, s) == doctest::Approx(s.lr_peak).epsilon(1e-12));

    for (int e = 21; e < 100; ++e) CHECK(lr_schedule(e, t) < lr_schedule(e - 1, t));
    CHECK_THROWS_AS(lr_schedule(-1, t), ConfigError);
    CHECK_THROWS_AS(lr_schedule(100, t), ConfigError);
}

TEST_CASE("adamw matches a hand-computed two-parameter update") {
    const double b1 = 0.9, b2 = 0.999, wd = 0.01, eps = 1e-8, lr = 1e-2;
    Tensor<double> p, g;
    p.resize({2});
    g.resize({2});
    p.v = {1.0, -0.5};
    // Quadratic loss 0.5*(2 p0^2 + p1^2): grad = (2 p0, p1).
    auto fill_grad = [&]() {
        g.v[0] = 2.0 * p.v[0];
        g.v[1] = p.v[1];
    };
    std::vector<Tensor<double>*> ps{&p}, gs{&g};
    AdamW<double> opt(b1, b2, wd, eps);

    double rp[2] = {1.0, -0.5}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 2; ++t) {
        fill_grad();
        // reference update, written out longhand
        double rg[2] = {2.0 * rp[0], rp[1]};
        for (int k = 0; k < 2; ++k) {
            m[k] = b1 * m[k] + (1 - b1) * rg[k];
            v[k] = b2 * v[k] + (1 - b2) * rg[k] * rg[k];
            const double mhat = m[k] / (1 - std::pow(b1, t));
            const double vhat = v[k] / (1 - std::pow(b2, t));
            rp[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * rp[k]);
        }
        opt.step(ps, gs, lr);
        CHECK(std::abs(p.v[0] - rp[0]) < 1e-12);
        CHECK(std::abs(p.v[1] - rp[1]) < 1e-12);
    }
    CHECK(opt.steps() == 2);
}

TEST_CASE("zero peak learning rate leaves parameters untouched") {
    Net<float> net(tiny_cfg());
    net.init_params(21);
    std::vector<float> before;
    for (auto* t : raw_tensors(net.params())) before.insert(before.end(), t->v.begin(), t->v.end());

    TrainConfig t = quick_cfg();
    t.epochs = 3;
    t.lr_peak = 0.0;
    t.lr_init = 0.0;
    std::vector<TrainingPair> pairs{make_pair(net.config(), 0), make_pair(net.config(), 1)};
    auto res = train(net, pairs, t);

    std::vector<float> after;
    for (auto* tt : raw_tensors(net.params())) after.insert(after.end(), tt->v.begin(), tt->v.end());
    CHECK(before == after);
    REQUIRE(res.curve.size() == 3);
    CHECK(res.curve[1].loss == res.curve[0].loss);
    CHECK(res.curve[2].loss == res.curve[0].loss);
}

TEST_CASE("training overfits a single pair") {
    Net<float> net(tiny_cfg());
    net.init_params(31);
    std::vector<TrainingPair> pairs{make_pair(net.config(), 0)};

    TrainConfig t;
    t.epochs = 400;
    t.batch_size = 1;
    t.warmup_epochs = 10;
    t.lr_peak = 3e-3;
    t.weight_decay = 0.0;
    t.seed = 5;
    auto res = train(net, pairs, t);

    int drops = 0, total = 0;
    for (std::size_t e = std::size_t(t.warmup_epochs) + 1; e < res.curve.size(); ++e) {
        ++total;
        if (res.curve[e].loss <= res.curve[e - 1].loss + 1e-12) ++drops;
    }
    CHECK(double(drops) / total >= 0.9);

    auto input = pack_kv_input<float>(net.config(), pairs[0].kv_ap, pairs[0].kv_lat);
    const auto& out = net.forward(input);
    VolumeMeta meta{{2, 2, 2}, {0, 0, 0}};
    Volume3D syn = unpack_output(net.config(), out, meta);
    double mae = 0;
    for (std::size_t i = 0; i < syn.data.size(); ++i)
        mae += std::abs(double(syn.data[i]) - double(pairs[0].ct.data[i]));
    mae /= double(syn.data.size());
    CHECK(mae < 20.0);
}

TEST_CASE("same seed reproduces the loss curve exactly") {
    std::vector<TrainingPair> pairs{make_pair(tiny_cfg(), 0), make_pair(tiny_cfg(), 1)};
    auto run = [&](std::uint64_t train_seed) {
        Net<float> net(tiny_cfg());
        net.init_params(3);
        TrainConfig t = quick_cfg();
        t.seed = train_seed;
        auto res = train(net, pairs, t);
        std::vector<float> params;
        for (auto* tt : raw_tensors(net.params()))
            params.insert(params.end(), tt->v.begin(), tt->v.end());
        return std::make_pair(res, params);
    };
    auto [r1, p1] = run(7);
    auto [r2, p2] = run(7);
    REQUIRE(r1.curve.size() == r2.curve.size());
    for (std::size_t i = 0; i < r1.curve.size(); ++i) {
        CHECK(r1.curve[i].loss == r2.curve[i].loss);
        CHECK(r1.curve[i].lr == r2.curve[i].lr);
    }
    CHECK(p1 == p2);

    auto [r3, p3] = run(8);
    bool any_diff = p1 != p3;
    for (std::size_t i = 0; i < r1.curve.size() && !any_diff; ++i)
        any_diff = r1.curve[i].loss != r3.curve[i].loss;
    CHECK(any_diff);
}

TEST_CASE("non-finite loss aborts naming the batch") {
    Net<float> net(tiny_cfg());
    net.init_params(41);
    auto pair = make_pair(net.config(), 0);
    pair.ct.data[5] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig t = quick_cfg();
    try {
        train(net, {pair}, t);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("batch") != std::string::npos);
        CHECK(msg.find("epoch") != std::string::npos);
    }
}

TEST_CASE("empty or mismatched pair sets are rejected") {
    Net<float> net(tiny_cfg());
    net.init_params(51);
    TrainConfig t = quick_cfg();
    CHECK_THROWS_AS(train(net, {}, t), ConfigError);
    auto pair = make_pair(net.config(), 0);
    pair.model_tag = "secondary";
    CHECK_THROWS_AS(train(net, {pair}, t), ConfigError);
}

TEST_CASE("best checkpoint tracks the curve minimum") {
    const auto stem = temp_stem("best");
    Net<float> net(tiny_cfg());
    net.init_params(61);
    std::vector<TrainingPair> pairs{make_pair(net.config(), 0)};
    TrainConfig t = quick_cfg();
    t.epochs = 8;
    auto res = train(net, pairs, t, stem.string());
    double mn = res.curve[0].loss;
    for (const auto& c : res.curve) mn = std::min(mn, c.loss);
    CHECK(res.best_loss == mn);
    CHECK(res.curve[std::size_t(res.best_epoch)].loss == mn);
    Net<float> best = load_checkpoint<float>(stem.string());
    CHECK(best.config().model_tag == net.config().model_tag);
    std::filesystem::remove(stem.string() + ".json");
    std::filesystem::remove(stem.string() + ".bin");

    const auto csv = temp_stem("curve.csv");
    write_loss_curve(csv.string(), res.curve);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    CHECK(header == "epoch,lr,loss");
    int lines = 0;
    for (std::string line; std::getline(f, line);) ++lines;
    CHECK(lines == t.epochs);
    f.close();
    std::filesystem::remove(csv);
}

}  // TEST_SUITE
