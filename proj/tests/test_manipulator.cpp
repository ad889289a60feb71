#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "flam/embedder.hpp"
#include "flam/error.hpp"
#include "flam/gradcheck.hpp"
#include "flam/io_util.hpp"
#include "flam/manipulator.hpp"
#include "flam/rng.hpp"
#include "flam/synthdata.hpp"

namespace ag = flam::ag;
namespace nn = flam::nn;
using ag::Tensor;
using flam::Dictionary;
using flam::Discriminator;
using flam::Embedder;
using flam::Generator;
using flam::ManipConfig;
using flam::Teachers;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("flam_gan_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

void fill_uniform(Tensor& t, flam::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (double& v : t.data()) v = rng.uniform(lo, hi);
}

// Scalar re-implementations, written independently of the tensor ops.
std::vector<double> s_mlp_forward(const nn::Mlp& mlp, std::vector<double> h) {
    for (std::size_t li = 0; li < mlp.layers.size(); ++li) {
        const nn::Affine& l = mlp.layers[li];
        const std::size_t in = l.w.shape()[0], out = l.w.shape()[1];
        std::vector<double> next(out);
        for (std::size_t j = 0; j < out; ++j) {
            double acc = l.b.data()[j];
            for (std::size_t i = 0; i < in; ++i) {
                acc += h[i] * l.w.data()[i * out + j];
            }
            next[j] = acc;
        }
        if (li + 1 < mlp.layers.size() || mlp.activate_output) {
            for (double& v : next) {
                if (v < 0.0) v *= mlp.leak;
            }
        }
        h = std::move(next);
    }
    if (mlp.normalize_output) {
        double s = 0.0;
        for (double v : h) s += v * v;
        const double norm = std::sqrt(s) + 1e-12;
        for (double& v : h) v /= norm;
    }
    return h;
}

std::vector<double> s_affine(const nn::Affine& l, const std::vector<double>& h) {
    const std::size_t in = l.w.shape()[0], out = l.w.shape()[1];
    std::vector<double> next(out);
    for (std::size_t j = 0; j < out; ++j) {
        double acc = l.b.data()[j];
        for (std::size_t i = 0; i < in; ++i) {
            acc += h[i] * l.w.data()[i * out + j];
        }
        next[j] = acc;
    }
    return next;
}

double s_log_sigmoid(double z) {
    return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

double s_cos(const std::vector<double>& u, const std::vector<double>& v) {
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uu += u[i] * u[i];
        vv += v[i] * v[i];
        uv += u[i] * v[i];
    }
    return uv / ((std::sqrt(uu) + 1e-12) * (std::sqrt(vv) + 1e-12));
}

std::vector<double> row_of(const Tensor& m, std::size_t r) {
    const std::size_t c = m.cols();
    return {m.data().begin() + r * c, m.data().begin() + (r + 1) * c};
}

std::vector<double> s_concat(const std::vector<double>& a,
                             const std::vector<double>& b) {
    std::vector<double> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

std::vector<double> s_generate(const Generator& g, const std::vector<double>& x,
                               const std::vector<double>& e) {
    return s_mlp_forward(g.mlp, s_concat(x, e));
}

double s_rf_logit(const Discriminator& d, const std::vector<double>& x) {
    return s_affine(d.head_rf, s_mlp_forward(d.trunk, x))[0];
}

double s_feature_matching(const Discriminator& d,
                          const std::vector<Embedder>& embs, const Tensor& x,
                          const Tensor& xm, const Tensor& xt, bool target_only) {
    const std::size_t B = x.rows();
    const std::size_t k = flam::embedding_dim(embs.front());
    double total = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        const auto fx = s_affine(d.head_fm, s_mlp_forward(d.trunk, row_of(x, r)));
        const auto ft = s_affine(d.head_fm, s_mlp_forward(d.trunk, row_of(xt, r)));
        std::vector<double> real_t, fake_t;
        for (std::size_t i = 0; i < embs.size(); ++i) {
            const auto on_x = s_mlp_forward(embs[i].mlp, row_of(x, r));
            if (i == 0) {
                real_t = on_x;
                fake_t = s_mlp_forward(embs[0].mlp, row_of(xm, r));
            } else {
                real_t = s_concat(real_t, on_x);
                fake_t = s_concat(fake_t, on_x);
            }
        }
        const std::size_t limit = target_only ? k : embs.size() * k;
        for (std::size_t c = 0; c < limit; ++c) {
            total += (fx[c] - real_t[c]) * (fx[c] - real_t[c]) +
                     (ft[c] - fake_t[c]) * (ft[c] - fake_t[c]);
        }
    }
    return total / static_cast<double>(B);
}

double s_cycle(const Generator& g, const Embedder& emb, const Tensor& x,
               const Tensor& e_minus) {
    double total = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto xr = row_of(x, r);
        const auto mid = s_generate(g, xr, row_of(e_minus, r));
        const auto hat = s_generate(g, mid, s_mlp_forward(emb.mlp, xr));
        for (std::size_t c = 0; c < xr.size(); ++c) {
            total += (xr[c] - hat[c]) * (xr[c] - hat[c]);
        }
    }
    return total / static_cast<double>(x.rows());
}

nn::Affine identity_affine(std::size_t d) {
    nn::Affine l;
    l.w = Tensor({d, d}, true);
    for (std::size_t i = 0; i < d; ++i) l.w.data()[i * d + i] = 1.0;
    l.b = Tensor({d}, true);
    return l;
}

nn::Affine zero_affine(std::size_t in, std::size_t out) {
    nn::Affine l;
    l.w = Tensor({in, out}, true);
    l.b = Tensor({out}, true);
    return l;
}

// G(x, e) == l2_normalize(A x): one affine layer whose e rows are zero.
Generator linear_generator(const std::vector<std::vector<double>>& a,
                           std::size_t k) {
    const std::size_t d = a.size();
    Generator g;
    nn::Affine l;
    l.w = Tensor({d + k, d}, true);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) l.w.data()[i * d + j] = a[i][j];
    }
    l.b = Tensor({d}, true);
    g.mlp.layers.push_back(l);
    g.mlp.normalize_output = true;
    return g;
}

Generator identity_generator(std::size_t d, std::size_t k) {
    std::vector<std::vector<double>> a(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < d; ++i) a[i][i] = 1.0;
    return linear_generator(a, k);
}

// embed(x) == l2_normalize(x[offset : offset+k])
Embedder select_embedder(std::string attr, std::size_t d, std::size_t k,
                         std::size_t offset) {
    Embedder e;
    e.attr_type = std::move(attr);
    nn::Affine l;
    l.w = Tensor({d, k}, true);
    for (std::size_t j = 0; j < k; ++j) l.w.data()[(offset + j) * k + j] = 1.0;
    l.b = Tensor({k}, true);
    e.mlp.layers.push_back(l);
    e.mlp.normalize_output = true;
    return e;
}

Generator random_generator(flam::Rng& rng, std::size_t d, std::size_t k,
                           std::size_t hidden) {
    Generator g;
    g.mlp = nn::make_mlp(rng, {d + k, hidden, hidden, d}, 0.2, false, true);
    return g;
}

Discriminator random_discriminator(flam::Rng& rng, std::size_t d,
                                   std::size_t hidden, std::size_t match_dim) {
    Discriminator out;
    out.trunk = nn::make_mlp(rng, {d, hidden, hidden}, 0.2, true, false);
    out.head_rf = nn::make_affine(rng, hidden, 1);
    out.head_fm = nn::make_affine(rng, hidden, match_dim);
    return out;
}

Embedder random_embedder(flam::Rng& rng, std::string attr, std::size_t d,
                         std::size_t k) {
    Embedder e;
    e.attr_type = std::move(attr);
    e.mlp = nn::make_mlp(rng, {d, 2 * k, k}, 0.2, false, true);
    return e;
}

flam::Dataset small_dataset(std::uint64_t seed, double label_density = 1.0,
                            std::size_t instances = 120, std::size_t dim = 32) {
    flam::GenConfig cfg;
    cfg.dim = dim;
    cfg.instances = instances;
    cfg.views = 2;
    cfg.label_density = label_density;
    return flam::generate(cfg, flam::AttributeSchema::defaults(), seed);
}

Teachers quick_teachers(const flam::Dataset& data, std::size_t k,
                        std::size_t epochs) {
    Teachers t;
    for (const std::string& type : data.schema.types) {
        flam::EmbedderConfig cfg;
        cfg.k = k;
        cfg.epochs = epochs;
        cfg.batch_size = 64;
        cfg.seed = 5;
        flam::EmbedderTrainResult r = flam::train_embedder(data, type, cfg);
        t.embedders.push_back(r.embedder);
        t.dictionaries.push_back(r.dictionary);
    }
    return t;
}

bool no_grad_on(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            if (g != 0.0) return false;
        }
    }
    return true;
}

bool tensors_bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.data() == b.data();
}

}  // namespace

TEST_CASE("manip config JSON round trip") {
    ManipConfig c;
    c.target_attr = "color";
    c.remaining_attrs = {"pattern", "shape"};
    c.lambda_adv = 0.5;
    c.lambda_match = 3.0;
    c.lambda_cycle = 7.25;
    c.matching = flam::Matching::S;
    c.sampling = flam::Sampling::os;
    c.label_mode = flam::LabelMode::pseudo_labels;
    c.lr = 2e-4;
    c.epochs = 9;
    c.batch_size = 32;
    c.hidden = 96;
    c.seed = 1234;

    const ManipConfig r = flam::manip_config_from_json(flam::manip_config_to_json(c));
    CHECK(r.target_attr == c.target_attr);
    CHECK(r.remaining_attrs == c.remaining_attrs);
    CHECK(r.lambda_adv == c.lambda_adv);
    CHECK(r.lambda_match == c.lambda_match);
    CHECK(r.lambda_cycle == c.lambda_cycle);
    CHECK(r.matching == c.matching);
    CHECK(r.sampling == c.sampling);
    CHECK(r.label_mode == c.label_mode);
    CHECK(r.lr == c.lr);
    CHECK(r.epochs == c.epochs);
    CHECK(r.batch_size == c.batch_size);
    CHECK(r.hidden == c.hidden);
    CHECK(r.seed == c.seed);

    SUBCASE("missing keys keep defaults") {
        const ManipConfig d = flam::manip_config_from_json(
            nlohmann::json{{"target_attr", "shape"}, {"epochs", 3}});
        CHECK(d.target_attr == "shape");
        CHECK(d.epochs == 3);
        CHECK(d.lambda_adv == 1.0);
        CHECK(d.lambda_match == 10.0);
        CHECK(d.lambda_cycle == 10.0);
        CHECK(d.matching == flam::Matching::M);
        CHECK(d.sampling == flam::Sampling::uniform);
        CHECK(d.label_mode == flam::LabelMode::true_labels);
        CHECK(d.batch_size == 128);
        CHECK(d.hidden == 128);
    }

    SUBCASE("unknown enum tokens are rejected") {
        CHECK_THROWS_AS(flam::manip_config_from_json({{"matching", "both"}}),
                        flam::ConfigError);
        CHECK_THROWS_AS(flam::manip_config_from_json({{"sampling", "hard"}}),
                        flam::ConfigError);
        CHECK_THROWS_AS(flam::manip_config_from_json({{"label_mode", "none"}}),
                        flam::ConfigError);
    }

    SUBCASE("enum round trips") {
        CHECK(flam::matching_from_string(to_string(flam::Matching::M)) ==
              flam::Matching::M);
        CHECK(flam::matching_from_string(to_string(flam::Matching::S)) ==
              flam::Matching::S);
        CHECK(flam::sampling_from_string(to_string(flam::Sampling::uniform)) ==
              flam::Sampling::uniform);
        CHECK(flam::sampling_from_string(to_string(flam::Sampling::os)) ==
              flam::Sampling::os);
        CHECK(flam::label_mode_from_string(to_string(
                  flam::LabelMode::true_labels)) == flam::LabelMode::true_labels);
        CHECK(flam::label_mode_from_string(to_string(
                  flam::LabelMode::pseudo_labels)) ==
              flam::LabelMode::pseudo_labels);
    }
}

TEST_CASE("generate shapes, determinism, and forward values") {
    flam::Rng rng(71);
    flam::Rng g_rng = rng.child("g");
    const std::size_t D = 5, k = 3;
    Generator g = random_generator(g_rng, D, k, 7);
    CHECK(flam::generator_feature_dim(g) == D);
    CHECK(flam::generator_embed_dim(g) == k);

    Tensor x({4, D}), e({4, k});
    fill_uniform(x, rng);
    fill_uniform(e, rng);

    Tensor out = flam::generate(g, x, e);
    REQUIRE(out.shape() == std::vector<std::size_t>{4, D});

    SUBCASE("rows are unit-norm and match the scalar forward") {
        for (std::size_t r = 0; r < 4; ++r) {
            const auto row = row_of(out, r);
            double s = 0.0;
            for (double v : row) s += v * v;
            CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-6));
            const auto want = s_generate(g, row_of(x, r), row_of(e, r));
            for (std::size_t c = 0; c < D; ++c) {
                CHECK(row[c] == doctest::Approx(want[c]).epsilon(1e-12));
            }
        }
    }

    SUBCASE("deterministic") {
        CHECK(tensors_bitwise_equal(out, flam::generate(g, x, e)));
    }

    SUBCASE("single vectors come back as one row") {
        Tensor xv = Tensor::vector(row_of(x, 1));
        Tensor ev = Tensor::vector(row_of(e, 1));
        Tensor single = flam::generate(g, xv, ev);
        REQUIRE(single.shape() == std::vector<std::size_t>{1, D});
        for (std::size_t c = 0; c < D; ++c) {
            CHECK(single.data()[c] ==
                  doctest::Approx(out.data()[D + c]).epsilon(1e-12));
        }
    }

    SUBCASE("dimension contracts") {
        CHECK_THROWS_AS(flam::generate(g, Tensor({4, D + 1}), e),
                        flam::ContractError);
        CHECK_THROWS_AS(flam::generate(g, x, Tensor({4, k + 1})),
                        flam::ContractError);
        CHECK_THROWS_AS(flam::generate(g, x, Tensor({3, k})),
                        flam::ContractError);
    }

    SUBCASE("identity-in-x generator returns the normalized feature") {
        Generator id = identity_generator(D, k);
        Tensor got = flam::generate(id, x, e);
        for (std::size_t r = 0; r < 4; ++r) {
            const auto xr = row_of(x, r);
            double s = 0.0;
            for (double v : xr) s += v * v;
            const double norm = std::sqrt(s);
            for (std::size_t c = 0; c < D; ++c) {
                CHECK(got.data()[r * D + c] ==
                      doctest::Approx(xr[c] / norm).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("adv_losses values") {
    const std::size_t D = 4;
    flam::Rng rng(301);

    SUBCASE("zero logits give 2 log 2") {
        Discriminator d;
        d.trunk.layers.push_back(identity_affine(D));
        d.trunk.activate_output = true;
        d.head_rf = zero_affine(D, 1);
        d.head_fm = zero_affine(D, 2);
        Tensor xr({3, D}), xf({3, D});
        fill_uniform(xr, rng);
        fill_uniform(xf, rng);
        flam::AdvLosses al = flam::adv_losses(d, xr, xf);
        CHECK(al.d_loss.item() ==
              doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
        CHECK(al.g_loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }

    SUBCASE("confident realness logit drives g_loss to zero") {
        Discriminator d;
        d.trunk.layers.push_back(identity_affine(D));
        d.trunk.activate_output = true;
        d.head_rf = zero_affine(D, 1);
        d.head_rf.b.data()[0] = 30.0;
        d.head_fm = zero_affine(D, 2);
        Tensor xr({2, D}), xf({2, D});
        fill_uniform(xr, rng);
        fill_uniform(xf, rng);
        flam::AdvLosses al = flam::adv_losses(d, xr, xf);
        CHECK(al.g_loss.item() < 1e-12);
        CHECK(al.g_loss.item() >= 0.0);
        CHECK(al.d_loss.item() > 29.0);  // fake side pays -log sigmoid(-30)
    }

    SUBCASE("random logits match the scalar formulas") {
        for (int rep = 0; rep < 20; ++rep) {
            flam::Rng d_rng = rng.child("d" + std::to_string(rep));
            Discriminator d = random_discriminator(d_rng, D, 6, 4);
            Tensor xr({3, D}), xf({3, D});
            fill_uniform(xr, rng);
            fill_uniform(xf, rng);
            double sum_real = 0.0, sum_fake_neg = 0.0, sum_fake = 0.0;
            for (std::size_t r = 0; r < 3; ++r) {
                const double zr = s_rf_logit(d, row_of(xr, r));
                const double zf = s_rf_logit(d, row_of(xf, r));
                sum_real += s_log_sigmoid(zr);
                sum_fake_neg += s_log_sigmoid(-zf);
                sum_fake += s_log_sigmoid(zf);
            }
            flam::AdvLosses al = flam::adv_losses(d, xr, xf);
            CHECK(al.d_loss.item() ==
                  doctest::Approx(-(sum_real + sum_fake_neg) / 3.0).epsilon(1e-10));
            CHECK(al.g_loss.item() ==
                  doctest::Approx(-sum_fake / 3.0).epsilon(1e-10));
            CHECK(al.d_loss.item() >= 0.0);
            CHECK(al.g_loss.item() >= 0.0);
        }
    }
}

TEST_CASE("adv_losses gradient routing") {
    flam::Rng rng(99);
    const std::size_t D = 4, k = 2;
    flam::Rng g_rng = rng.child("g");
    flam::Rng d_rng = rng.child("d");
    Generator g = random_generator(g_rng, D, k, 6);
    Discriminator d = random_discriminator(d_rng, D, 6, 2 * k);
    Tensor x({3, D}), e({3, k});
    fill_uniform(x, rng);
    fill_uniform(e, rng);
    std::vector<Tensor> g_params = nn::parameters(g.mlp);
    std::vector<Tensor> d_core = nn::parameters(d.trunk);
    d_core.push_back(d.head_rf.w);
    d_core.push_back(d.head_rf.b);

    SUBCASE("d_loss never reaches the generator") {
        ag::Tape tape;
        Tensor x_fake = flam::generate(g, x, e);
        flam::AdvLosses al = flam::adv_losses(d, x, x_fake);
        tape.backward(al.d_loss);
        CHECK(no_grad_on(g_params));
        bool d_touched = false;
        for (const Tensor& p : d_core) {
            if (!p.has_grad()) continue;
            for (double v : p.grad()) d_touched |= v != 0.0;
        }
        CHECK(d_touched);
    }

    SUBCASE("g_loss reaches the generator through the fake") {
        ag::Tape tape;
        Tensor x_fake = flam::generate(g, x, e);
        flam::AdvLosses al = flam::adv_losses(d, x, x_fake);
        tape.backward(al.g_loss);
        bool g_touched = false;
        for (const Tensor& p : g_params) {
            if (!p.has_grad()) continue;
            for (double v : p.grad()) g_touched |= v != 0.0;
        }
        CHECK(g_touched);
    }

    SUBCASE("gradients pass fd_check") {
        Tensor x_fake_const = flam::generate(g, x, e).detach();
        const double err_rf = ag::fd_check(
            [&](const Tensor& w) {
                Discriminator probe = d;
                probe.head_rf.w = w;
                return flam::adv_losses(probe, x, x_fake_const).d_loss;
            },
            d.head_rf.w);
        CHECK(err_rf < 1e-4);

        const double err_trunk = ag::fd_check(
            [&](const Tensor& w) {
                Discriminator probe = d;
                probe.trunk.layers[0].w = w;
                return flam::adv_losses(probe, x, x_fake_const).d_loss;
            },
            d.trunk.layers[0].w);
        CHECK(err_trunk < 1e-4);

        const double err_gen = ag::fd_check(
            [&](const Tensor& w) {
                Generator probe = g;
                probe.mlp.layers[0].w = w;
                return flam::adv_losses(d, x, flam::generate(probe, x, e)).g_loss;
            },
            g.mlp.layers[0].w);
        CHECK(err_gen < 1e-4);
    }
}

TEST_CASE("feature_matching_loss values") {
    SUBCASE("exact match gives zero, single attribute") {
        const std::size_t D = 2, k = 2;
        Discriminator d;
        d.trunk.layers.push_back(identity_affine(D));
        d.trunk.activate_output = true;
        d.head_rf = zero_affine(D, 1);
        d.head_fm = identity_affine(D);
        std::vector<Embedder> embs = {select_embedder("shape", D, k, 0)};
        Tensor x = Tensor::matrix(2, D, {0.6, 0.8, 1.0, 0.0});
        Tensor xm = Tensor::matrix(2, D, {0.28, 0.96, 0.8, 0.6});
        CHECK(flam::feature_matching_loss(d, embs, x, xm, xm,
                                          flam::Matching::M)
                  .item() == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(flam::feature_matching_loss(d, embs, x, xm, xm,
                                          flam::Matching::S)
                  .item() == doctest::Approx(0.0).epsilon(1e-9));
    }

    SUBCASE("masking keeps the target block and drops the rest") {
        const std::size_t D = 4, k = 2;
        Discriminator d;
        d.trunk.layers.push_back(identity_affine(D));
        d.trunk.activate_output = true;
        d.head_rf = zero_affine(D, 1);
        d.head_fm = identity_affine(D);
        std::vector<Embedder> embs = {select_embedder("shape", D, k, 0),
                                      select_embedder("color", D, k, 2)};
        // rows with unit-norm halves so the select embedders reproduce them
        Tensor x = Tensor::matrix(2, D, {0.6, 0.8, 0.28, 0.96,  //
                                         0.28, 0.96, 0.6, 0.8});
        Tensor xm = Tensor::matrix(2, D, {0.96, 0.28, 0.5, 0.5,  //
                                          0.8, 0.6, 0.5, 0.5});

        // fake with the partner's target half and the anchor's remaining half
        Tensor xt_aligned = Tensor::matrix(2, D, {0.96, 0.28, 0.28, 0.96,  //
                                                  0.8, 0.6, 0.6, 0.8});
        const double m_aligned =
            flam::feature_matching_loss(d, embs, x, xm, xt_aligned,
                                        flam::Matching::M)
                .item();
        const double s_aligned =
            flam::feature_matching_loss(d, embs, x, xm, xt_aligned,
                                        flam::Matching::S)
                .item();
        CHECK(m_aligned == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(s_aligned == doctest::Approx(0.0).epsilon(1e-9));

        // off-target fake half: both modes pay for it equally
        Tensor xt_target_off = Tensor::matrix(2, D, {0.5, 0.5, 0.28, 0.96,  //
                                                     0.5, 0.5, 0.6, 0.8});
        double expect_target = 0.0;
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t c = 0; c < k; ++c) {
                const double diff =
                    0.5 - xm.data()[r * D + c];
                expect_target += diff * diff;
            }
        }
        expect_target /= 2.0;
        const double m_off =
            flam::feature_matching_loss(d, embs, x, xm, xt_target_off,
                                        flam::Matching::M)
                .item();
        const double s_off =
            flam::feature_matching_loss(d, embs, x, xm, xt_target_off,
                                        flam::Matching::S)
                .item();
        CHECK(m_off == doctest::Approx(expect_target).epsilon(1e-9));
        CHECK(s_off == doctest::Approx(expect_target).epsilon(1e-9));

        // off-remaining fake half: only mode M pays for it
        Tensor xt_remaining_off =
            Tensor::matrix(2, D, {0.96, 0.28, 0.6, 0.8,  //
                                  0.8, 0.6, 0.28, 0.96});
        double expect_rem = 0.0;
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t c = 0; c < k; ++c) {
                const double diff = xt_remaining_off.data()[r * D + k + c] -
                                    x.data()[r * D + k + c];
                expect_rem += diff * diff;
            }
        }
        expect_rem /= 2.0;
        const double m_rem =
            flam::feature_matching_loss(d, embs, x, xm, xt_remaining_off,
                                        flam::Matching::M)
                .item();
        const double s_rem =
            flam::feature_matching_loss(d, embs, x, xm, xt_remaining_off,
                                        flam::Matching::S)
                .item();
        CHECK(m_rem == doctest::Approx(expect_rem).epsilon(1e-9));
        CHECK(s_rem == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(m_rem > s_rem);
    }

    SUBCASE("random nets match the scalar oracle, M never below S") {
        flam::Rng rng(515);
        const std::size_t D = 5, k = 3, n = 3;
        for (int rep = 0; rep < 10; ++rep) {
            flam::Rng net_rng = rng.child("net" + std::to_string(rep));
            Discriminator d = random_discriminator(net_rng, D, 6, n * k);
            std::vector<Embedder> embs;
            for (std::size_t i = 0; i < n; ++i) {
                embs.push_back(
                    random_embedder(net_rng, "attr" + std::to_string(i), D, k));
            }
            Tensor x({4, D}), xm({4, D}), xt({4, D});
            fill_uniform(x, rng);
            fill_uniform(xm, rng);
            fill_uniform(xt, rng);
            const double got_m =
                flam::feature_matching_loss(d, embs, x, xm, xt,
                                            flam::Matching::M)
                    .item();
            const double got_s =
                flam::feature_matching_loss(d, embs, x, xm, xt,
                                            flam::Matching::S)
                    .item();
            CHECK(got_m ==
                  doctest::Approx(s_feature_matching(d, embs, x, xm, xt, false))
                      .epsilon(1e-10));
            CHECK(got_s ==
                  doctest::Approx(s_feature_matching(d, embs, x, xm, xt, true))
                      .epsilon(1e-10));
            CHECK(got_m >= got_s - 1e-12);
        }
    }

    SUBCASE("scheduling contracts") {
        flam::Rng rng(21);
        const std::size_t D = 4, k = 2;
        Discriminator d = random_discriminator(rng, D, 5, 2 * k);
        std::vector<Embedder> embs = {random_embedder(rng, "a", D, k),
                                      random_embedder(rng, "b", D, k)};
        Tensor x({2, D}), xm({2, D}), xt({2, D});
        fill_uniform(x, rng);
        fill_uniform(xm, rng);
        fill_uniform(xt, rng);

        CHECK_THROWS_AS(flam::feature_matching_loss(d, {}, x, xm, xt,
                                                    flam::Matching::M),
                        flam::ConfigError);

        std::vector<Embedder> mixed_k = {random_embedder(rng, "a", D, k),
                                         random_embedder(rng, "b", D, k + 1)};
        CHECK_THROWS_AS(flam::feature_matching_loss(d, mixed_k, x, xm, xt,
                                                    flam::Matching::M),
                        flam::ConfigError);

        std::vector<Embedder> too_few = {random_embedder(rng, "a", D, k)};
        CHECK_THROWS_AS(flam::feature_matching_loss(d, too_few, x, xm, xt,
                                                    flam::Matching::M),
                        flam::ConfigError);

        CHECK_THROWS_AS(flam::feature_matching_loss(d, embs, x, Tensor({3, D}),
                                                    xt, flam::Matching::M),
                        flam::ContractError);
    }

    SUBCASE("gradients pass fd_check, teachers stay frozen") {
        flam::Rng rng(808);
        const std::size_t D = 5, k = 2, n = 2;
        flam::Rng net_rng = rng.child("nets");
        Discriminator d = random_discriminator(net_rng, D, 6, n * k);
        Generator g = random_generator(net_rng, D, k, 6);
        std::vector<Embedder> embs = {random_embedder(net_rng, "a", D, k),
                                      random_embedder(net_rng, "b", D, k)};
        Tensor x({3, D}), xm({3, D}), e({3, k});
        fill_uniform(x, rng);
        fill_uniform(xm, rng);
        fill_uniform(e, rng);
        Tensor xt_const = flam::generate(g, x, e).detach();

        const double err_fm = ag::fd_check(
            [&](const Tensor& w) {
                Discriminator probe = d;
                probe.head_fm.w = w;
                return flam::feature_matching_loss(probe, embs, x, xm, xt_const,
                                                   flam::Matching::M);
            },
            d.head_fm.w);
        CHECK(err_fm < 1e-4);

        const double err_trunk = ag::fd_check(
            [&](const Tensor& w) {
                Discriminator probe = d;
                probe.trunk.layers[0].w = w;
                return flam::feature_matching_loss(probe, embs, x, xm, xt_const,
                                                   flam::Matching::S);
            },
            d.trunk.layers[0].w);
        CHECK(err_trunk < 1e-4);

        const double err_gen = ag::fd_check(
            [&](const Tensor& w) {
                Generator probe = g;
                probe.mlp.layers[0].w = w;
                return flam::feature_matching_loss(
                    d, embs, x, xm, flam::generate(probe, x, e),
                    flam::Matching::M);
            },
            g.mlp.layers[0].w);
        CHECK(err_gen < 1e-4);

        ag::Tape tape;
        Tensor xt = flam::generate(g, x, e);
        Tensor loss =
            flam::feature_matching_loss(d, embs, x, xm, xt, flam::Matching::M);
        tape.backward(loss);
        for (const Embedder& emb : embs) {
            CHECK(no_grad_on(nn::parameters(emb.mlp)));
        }
        bool g_touched = false;
        for (const Tensor& p : nn::parameters(g.mlp)) {
            if (!p.has_grad()) continue;
            for (double v : p.grad()) g_touched |= v != 0.0;
        }
        CHECK(g_touched);
    }
}

TEST_CASE("cycle_loss values") {
    SUBCASE("identity generator closes the loop") {
        const std::size_t D = 4, k = 4;
        Generator id = identity_generator(D, k);
        Embedder emb = select_embedder("shape", D, k, 0);
        flam::Rng rng(7);
        Tensor x({3, D}), e({3, k});
        fill_uniform(x, rng);
        fill_uniform(e, rng);
        // unit rows, so normalization inside G is a no-op
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < D; ++c) {
                s += x.data()[r * D + c] * x.data()[r * D + c];
            }
            for (std::size_t c = 0; c < D; ++c) x.data()[r * D + c] /= std::sqrt(s);
        }
        CHECK(flam::cycle_loss(id, emb, x, e).item() ==
              doctest::Approx(0.0).epsilon(1e-9));
    }

    SUBCASE("antipodal round trip costs 4 per unit row") {
        // quarter-turn generator: applying it twice negates the feature
        Generator rot = linear_generator({{0.0, 1.0}, {-1.0, 0.0}}, 1);
        Embedder emb = select_embedder("shape", 2, 1, 0);
        Tensor x = Tensor::matrix(2, 2, {1.0, 0.0, 0.6, 0.8});
        Tensor e = Tensor::matrix(2, 1, {0.3, -0.4});
        CHECK(flam::cycle_loss(rot, emb, x, e).item() ==
              doctest::Approx(4.0).epsilon(1e-9));
    }

    SUBCASE("random generator matches the scalar oracle") {
        flam::Rng rng(606);
        const std::size_t D = 5, k = 3;
        for (int rep = 0; rep < 10; ++rep) {
            flam::Rng net_rng = rng.child("net" + std::to_string(rep));
            Generator g = random_generator(net_rng, D, k, 6);
            Embedder emb = random_embedder(net_rng, "shape", D, k);
            Tensor x({3, D}), e({3, k});
            fill_uniform(x, rng);
            fill_uniform(e, rng);
            CHECK(flam::cycle_loss(g, emb, x, e).item() ==
                  doctest::Approx(s_cycle(g, emb, x, e)).epsilon(1e-10));
        }
    }

    SUBCASE("gradient passes fd_check, teacher stays frozen") {
        flam::Rng rng(909);
        const std::size_t D = 4, k = 2;
        flam::Rng net_rng = rng.child("nets");
        Generator g = random_generator(net_rng, D, k, 5);
        Embedder emb = random_embedder(net_rng, "shape", D, k);
        Tensor x({3, D}), e({3, k});
        fill_uniform(x, rng);
        fill_uniform(e, rng);

        const double err = ag::fd_check(
            [&](const Tensor& w) {
                Generator probe = g;
                probe.mlp.layers[1].w = w;
                return flam::cycle_loss(probe, emb, x, e);
            },
            g.mlp.layers[1].w);
        CHECK(err < 1e-4);

        ag::Tape tape;
        Tensor loss = flam::cycle_loss(g, emb, x, e);
        tape.backward(loss);
        CHECK(no_grad_on(nn::parameters(emb.mlp)));
    }
}

TEST_CASE("online_sample") {
    flam::Rng rng(42);

    SUBCASE("matches the exhaustive scan") {
        for (int rep = 0; rep < 50; ++rep) {
            const std::size_t B = 16, k = 4;
            std::vector<std::int32_t> cls(B);
            for (auto& c : cls) {
                c = static_cast<std::int32_t>(rng.uniform_int(4));
            }
            std::vector<Tensor> rem;
            for (int a = 0; a < 2; ++a) {
                Tensor m({B, k});
                fill_uniform(m, rng);
                rem.push_back(m);
            }
            for (std::size_t anchor = 0; anchor < B; ++anchor) {
                std::ptrdiff_t want = flam::kNoCandidate;
                double want_cost = 0.0;
                for (std::size_t j = 0; j < B; ++j) {
                    if (cls[j] == cls[anchor]) continue;
                    double cost = 0.0;
                    for (const Tensor& m : rem) {
                        cost += 1.0 - s_cos(row_of(m, anchor), row_of(m, j));
                    }
                    if (want == flam::kNoCandidate || cost < want_cost) {
                        want = static_cast<std::ptrdiff_t>(j);
                        want_cost = cost;
                    }
                }
                const std::ptrdiff_t got = flam::online_sample(rem, cls, anchor);
                CHECK(got == want);
                if (got != flam::kNoCandidate) {
                    CHECK(cls[static_cast<std::size_t>(got)] != cls[anchor]);
                }
            }
        }
    }

    SUBCASE("single eligible candidate wins") {
        Tensor m({4, 2});
        fill_uniform(m, rng);
        CHECK(flam::online_sample({m}, {0, 0, 1, 0}, 0) == 2);
    }

    SUBCASE("identical remaining embedding wins, ties go to the lowest row") {
        const std::size_t B = 8, k = 3;
        Tensor m({B, k});
        fill_uniform(m, rng);
        std::vector<std::int32_t> cls(B, 1);
        cls[0] = 0;
        for (std::size_t c = 0; c < k; ++c) {
            m.data()[5 * k + c] = m.data()[c];
        }
        CHECK(flam::online_sample({m}, cls, 0) == 5);

        for (std::size_t c = 0; c < k; ++c) {
            m.data()[3 * k + c] = m.data()[c];
        }
        CHECK(flam::online_sample({m}, cls, 0) == 3);
    }

    SUBCASE("no candidate signals a skip") {
        Tensor m({3, 2});
        fill_uniform(m, rng);
        CHECK(flam::online_sample({m}, {2, 2, 2}, 1) == flam::kNoCandidate);
    }

    SUBCASE("no remaining attributes: every eligible row ties at zero") {
        CHECK(flam::online_sample({}, {0, 1, 1}, 0) == 1);
        CHECK(flam::online_sample({}, {1, 1, 0}, 0) == 2);
    }

    SUBCASE("contracts") {
        Tensor m({3, 2});
        CHECK_THROWS_AS(flam::online_sample({m}, {0, 1, 1}, 3),
                        flam::ContractError);
        Tensor ragged({2, 2});
        CHECK_THROWS_AS(flam::online_sample({ragged}, {0, 1, 1}, 0),
                        flam::ContractError);
    }
}

TEST_CASE("convergence_proxy") {
    SUBCASE("identity generator scores 1") {
        const std::size_t D = 4, k = 4;
        Generator id = identity_generator(D, k);
        Embedder emb = select_embedder("shape", D, k, 0);
        flam::Rng rng(3);
        Tensor x({5, D});
        fill_uniform(x, rng);
        CHECK(flam::convergence_proxy(id, emb, x, 1) ==
              doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("an eighth-turn generator makes the round trip orthogonal") {
        const double c = std::sqrt(0.5);
        Generator rot = linear_generator({{c, c}, {-c, c}}, 1);
        Embedder emb = select_embedder("shape", 2, 1, 0);
        Tensor x = Tensor::matrix(1, 2, {1.0, 0.0});
        CHECK(flam::convergence_proxy(rot, emb, x, 0) ==
              doctest::Approx(0.0).epsilon(1e-9));
    }

    SUBCASE("deterministic in the seed") {
        flam::Rng rng(88);
        flam::Rng net_rng = rng.child("nets");
        Generator g = random_generator(net_rng, 4, 2, 5);
        Embedder emb = random_embedder(net_rng, "shape", 4, 2);
        Tensor x({6, 4});
        fill_uniform(x, rng);
        const double a = flam::convergence_proxy(g, emb, x, 9);
        CHECK(a == flam::convergence_proxy(g, emb, x, 9));
        CHECK(a >= -1.0);
        CHECK(a <= 1.0);
    }

    SUBCASE("empty sample is a contract error") {
        Generator id = identity_generator(3, 3);
        Embedder emb = select_embedder("shape", 3, 3, 0);
        CHECK_THROWS_AS(flam::convergence_proxy(id, emb, Tensor({0, 3}), 0),
                        flam::ContractError);
        CHECK_THROWS_AS(flam::convergence_proxy(id, emb, Tensor(), 0),
                        flam::ContractError);
    }

    SUBCASE("a single row draws itself as the partner") {
        const std::size_t D = 3, k = 3;
        Generator id = identity_generator(D, k);
        Embedder emb = select_embedder("shape", D, k, 0);
        Tensor x = Tensor::matrix(1, D, {0.6, 0.8, 0.0});
        CHECK(flam::convergence_proxy(id, emb, x, 4) ==
              doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("train_manipulator shapes, determinism, and contracts") {
    const flam::Dataset data = small_dataset(17);
    const std::size_t D = data.config.dim;
    const std::size_t k = 8;
    Teachers teachers = quick_teachers(data, k, 0);

    ManipConfig cfg;
    cfg.target_attr = "color";
    cfg.hidden = 24;
    cfg.batch_size = 64;
    cfg.seed = 11;

    SUBCASE("zero epochs returns fresh nets and an empty log") {
        cfg.epochs = 0;
        flam::ManipTrainResult r = flam::train_manipulator(data, teachers, cfg);
        CHECK(r.epochs.empty());
        CHECK(flam::generator_feature_dim(r.generator) == D);
        CHECK(flam::generator_embed_dim(r.generator) == k);
        CHECK(r.generator.mlp.layers.size() == 3);
        CHECK(r.generator.mlp.normalize_output);
        CHECK_FALSE(r.generator.mlp.activate_output);
        CHECK(flam::discriminator_feature_dim(r.discriminator) == D);
        CHECK(flam::discriminator_match_dim(r.discriminator) == 3 * k);
        CHECK(r.discriminator.trunk.layers.size() == 2);
        CHECK(r.discriminator.trunk.activate_output);
        CHECK(nn::output_dim(r.discriminator.trunk) == cfg.hidden);
        CHECK(r.discriminator.head_rf.w.shape() ==
              std::vector<std::size_t>{cfg.hidden, 1});
        CHECK(r.discriminator.head_fm.w.shape() ==
              std::vector<std::size_t>{cfg.hidden, 3 * k});
    }

    SUBCASE("same seed reproduces the run bitwise") {
        cfg.epochs = 2;
        flam::ManipTrainResult a = flam::train_manipulator(data, teachers, cfg);
        flam::ManipTrainResult b = flam::train_manipulator(data, teachers, cfg);
        REQUIRE(a.epochs.size() == 2);
        for (std::size_t i = 0; i < a.epochs.size(); ++i) {
            CHECK(a.epochs[i].d_adv == b.epochs[i].d_adv);
            CHECK(a.epochs[i].g_adv == b.epochs[i].g_adv);
            CHECK(a.epochs[i].match == b.epochs[i].match);
            CHECK(a.epochs[i].cycle == b.epochs[i].cycle);
            CHECK(a.epochs[i].proxy == b.epochs[i].proxy);
        }
        for (std::size_t i = 0; i < a.generator.mlp.layers.size(); ++i) {
            CHECK(tensors_bitwise_equal(a.generator.mlp.layers[i].w,
                                        b.generator.mlp.layers[i].w));
        }
        CHECK(tensors_bitwise_equal(a.discriminator.head_fm.w,
                                    b.discriminator.head_fm.w));

        cfg.seed = 12;
        flam::ManipTrainResult c = flam::train_manipulator(data, teachers, cfg);
        CHECK(a.epochs[1].match != c.epochs[1].match);
    }

    SUBCASE("every loss term lands in the log") {
        cfg.epochs = 2;
        flam::ManipTrainResult r = flam::train_manipulator(data, teachers, cfg);
        for (const flam::EpochLog& log : r.epochs) {
            CHECK(std::isfinite(log.d_adv));
            CHECK(log.d_adv > 0.0);
            CHECK(log.g_adv > 0.0);
            CHECK(log.match > 0.0);
            CHECK(log.cycle > 0.0);
            CHECK(log.proxy >= -1.0);
            CHECK(log.proxy <= 1.0);
        }
    }

    SUBCASE("teachers receive no gradient") {
        cfg.epochs = 1;
        flam::train_manipulator(data, teachers, cfg);
        for (const Embedder& e : teachers.embedders) {
            CHECK(no_grad_on(nn::parameters(e.mlp)));
        }
        for (const Dictionary& d : teachers.dictionaries) {
            CHECK(no_grad_on({d.vectors}));
        }
    }

    SUBCASE("online sampling changes the pairing") {
        cfg.epochs = 1;
        flam::ManipTrainResult uni = flam::train_manipulator(data, teachers, cfg);
        cfg.sampling = flam::Sampling::os;
        flam::ManipTrainResult os = flam::train_manipulator(data, teachers, cfg);
        CHECK(uni.epochs[0].match != os.epochs[0].match);
    }

    SUBCASE("explicit remaining order is honored, any order") {
        cfg.epochs = 1;
        cfg.remaining_attrs = {"pattern", "shape"};
        flam::ManipTrainResult r = flam::train_manipulator(data, teachers, cfg);
        CHECK(r.epochs.size() == 1);
    }

    SUBCASE("config rejections") {
        cfg.epochs = 1;
        ManipConfig bad = cfg;
        bad.target_attr = "texture";
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        bad = cfg;
        bad.lambda_match = -1.0;
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        bad = cfg;
        bad.batch_size = 1;
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        bad = cfg;
        bad.hidden = 0;
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        bad = cfg;
        bad.remaining_attrs = {"shape"};
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        bad = cfg;
        bad.remaining_attrs = {"shape", "shape"};
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        bad = cfg;
        bad.remaining_attrs = {"color", "shape"};
        CHECK_THROWS_AS(flam::train_manipulator(data, teachers, bad),
                        flam::ConfigError);

        Teachers missing;
        missing.embedders = {teachers.embedders[0]};  // shape only
        missing.dictionaries = teachers.dictionaries;
        CHECK_THROWS_AS(flam::train_manipulator(data, missing, cfg),
                        flam::ConfigError);

        Teachers no_dict = teachers;
        no_dict.dictionaries.clear();
        ManipConfig pseudo = cfg;
        pseudo.label_mode = flam::LabelMode::pseudo_labels;
        CHECK_THROWS_AS(flam::train_manipulator(data, no_dict, pseudo),
                        flam::ConfigError);
    }

    SUBCASE("single target class aborts") {
        flam::Dataset flat = data;
        for (flam::FeatureRecord& rec : flat.records) rec.labels[1] = 4;
        cfg.epochs = 1;
        CHECK_THROWS_AS(flam::train_manipulator(flat, teachers, cfg),
                        flam::TrainError);
    }

    SUBCASE("a non-finite loss aborts with the failing step") {
        flam::Dataset poisoned = data;
        poisoned.records[3].feature[0] = std::nanf("");
        cfg.epochs = 1;
        bool threw = false;
        try {
            flam::train_manipulator(poisoned, teachers, cfg);
        } catch (const flam::TrainError& e) {
            threw = true;
            CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
        }
        CHECK(threw);
    }
}

TEST_CASE("cycle-only training converges to the round-trip identity") {
    const flam::Dataset data = small_dataset(23, 1.0, 200);
    Teachers teachers = quick_teachers(data, 8, 0);

    ManipConfig cfg;
    cfg.target_attr = "shape";
    cfg.lambda_adv = 0.0;
    cfg.lambda_match = 0.0;
    cfg.lambda_cycle = 10.0;
    cfg.lr = 3e-3;
    cfg.hidden = 96;
    cfg.batch_size = 64;
    cfg.epochs = 80;
    cfg.seed = 31;

    flam::ManipTrainResult r = flam::train_manipulator(data, teachers, cfg);
    REQUIRE(r.epochs.size() == 80);

    ManipConfig init_cfg = cfg;
    init_cfg.epochs = 0;
    flam::ManipTrainResult init =
        flam::train_manipulator(data, teachers, init_cfg);
    const Tensor sample = flam::feature_matrix(data.records);
    const double before = flam::convergence_proxy(
        init.generator, teachers.embedders[0], sample, 3);
    const double after = flam::convergence_proxy(
        r.generator, teachers.embedders[0], sample, 3);

    CHECK(after >= 0.97);
    CHECK(before < after);
    CHECK(r.epochs.back().cycle < r.epochs.front().cycle);
    CHECK(r.epochs.back().proxy >= 0.97);
    for (const flam::EpochLog& log : r.epochs) {
        CHECK(log.d_adv == 0.0);
        CHECK(log.g_adv == 0.0);
        CHECK(log.match == 0.0);
    }
}

TEST_CASE("pseudo-label mode trains on sparse labels") {
    const flam::Dataset sparse = small_dataset(29, 0.3, 150);
    Teachers teachers = quick_teachers(sparse, 8, 3);

    ManipConfig cfg;
    cfg.target_attr = "color";
    cfg.label_mode = flam::LabelMode::pseudo_labels;
    cfg.hidden = 24;
    cfg.batch_size = 64;
    cfg.epochs = 2;
    cfg.seed = 3;

    flam::ManipTrainResult r = flam::train_manipulator(sparse, teachers, cfg);
    REQUIRE(r.epochs.size() == 2);
    for (const flam::EpochLog& log : r.epochs) {
        CHECK(std::isfinite(log.match));
        CHECK(log.match > 0.0);
        CHECK(std::isfinite(log.proxy));
    }
}

TEST_CASE("manipulator checkpoint round trip") {
    TempDir tmp;
    flam::Rng rng(404);
    const std::size_t D = 6, k = 3, n = 2;
    flam::Rng net_rng = rng.child("nets");
    Generator g = random_generator(net_rng, D, k, 8);
    Discriminator d = random_discriminator(net_rng, D, 8, n * k);

    const auto path = tmp.path / "manip.flamgan";
    flam::save_manipulator(path, g, d, nlohmann::json{{"note", "test"}});
    CHECK(std::filesystem::exists(path));
    CHECK(std::filesystem::exists(tmp.path / "manip.flamgan.log.json"));

    flam::LoadedManipulator loaded = flam::load_manipulator(path);

    SUBCASE("weights survive as float32") {
        REQUIRE(loaded.generator.mlp.layers.size() == g.mlp.layers.size());
        for (std::size_t li = 0; li < g.mlp.layers.size(); ++li) {
            const Tensor& orig = g.mlp.layers[li].w;
            const Tensor& got = loaded.generator.mlp.layers[li].w;
            REQUIRE(got.shape() == orig.shape());
            for (std::size_t i = 0; i < orig.size(); ++i) {
                CHECK(got.data()[i] ==
                      static_cast<double>(static_cast<float>(orig.data()[i])));
            }
        }
        CHECK(loaded.generator.mlp.normalize_output);
        CHECK_FALSE(loaded.generator.mlp.activate_output);
        CHECK(loaded.discriminator.trunk.activate_output);
        CHECK(flam::generator_embed_dim(loaded.generator) == k);
        CHECK(flam::discriminator_match_dim(loaded.discriminator) == n * k);
        const Tensor& fm_orig = d.head_fm.w;
        const Tensor& fm_got = loaded.discriminator.head_fm.w;
        REQUIRE(fm_got.shape() == fm_orig.shape());
        for (std::size_t i = 0; i < fm_orig.size(); ++i) {
            CHECK(fm_got.data()[i] ==
                  static_cast<double>(static_cast<float>(fm_orig.data()[i])));
        }
    }

    SUBCASE("save of a loaded checkpoint is byte-identical") {
        const auto again = tmp.path / "again.flamgan";
        flam::save_manipulator(again, loaded.generator, loaded.discriminator);
        CHECK(flam::io::sha256_file(path) == flam::io::sha256_file(again));
        CHECK_FALSE(std::filesystem::exists(tmp.path / "again.flamgan.log.json"));
    }

    SUBCASE("loaded generator behaves like the saved one") {
        Tensor x({2, D}), e({2, k});
        fill_uniform(x, rng);
        fill_uniform(e, rng);
        const Tensor a = flam::generate(g, x, e);
        const Tensor b = flam::generate(loaded.generator, x, e);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(b.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-5));
        }
        const Tensor la = flam::discriminator_logits(d, x);
        const Tensor lb = flam::discriminator_logits(loaded.discriminator, x);
        for (std::size_t i = 0; i < la.size(); ++i) {
            CHECK(lb.data()[i] == doctest::Approx(la.data()[i]).epsilon(1e-5));
        }
    }

    SUBCASE("malformed files are rejected") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        in.close();

        const auto write_bytes = [&](const std::string& name,
                                     const std::string& content) {
            const auto p = tmp.path / name;
            std::ofstream out(p, std::ios::binary);
            out.write(content.data(),
                      static_cast<std::streamsize>(content.size()));
            out.close();
            return p;
        };

        std::string bad_magic = bytes;
        bad_magic[0] = 'X';
        CHECK_THROWS_AS(
            flam::load_manipulator(write_bytes("bad_magic.flamgan", bad_magic)),
            flam::DataError);

        CHECK_THROWS_AS(flam::load_manipulator(write_bytes(
                            "truncated.flamgan",
                            bytes.substr(0, bytes.size() - 10))),
                        flam::DataError);

        CHECK_THROWS_AS(flam::load_manipulator(write_bytes(
                            "trailing.flamgan", bytes + "junk")),
                        flam::DataError);

        std::string bad_version = bytes;
        bad_version[7] = 9;
        CHECK_THROWS_AS(flam::load_manipulator(write_bytes(
                            "bad_version.flamgan", bad_version)),
                        flam::DataError);
    }
}

TEST_CASE("trained manipulator moves the target attribute") {
    flam::GenConfig gen;
    gen.dim = 48;
    gen.instances = 400;
    gen.views = 2;
    const flam::Dataset data =
        flam::generate(gen, flam::AttributeSchema::defaults(), 57);
    const flam::Splits splits =
        flam::split(data, {0.8, 0.0, 0.2}, 91);

    flam::EmbedderConfig ecfg;
    ecfg.k = 16;
    ecfg.epochs = 20;
    ecfg.batch_size = 64;
    ecfg.seed = 7;
    Teachers teachers;
    for (const std::string& type : data.schema.types) {
        flam::EmbedderTrainResult r =
            flam::train_embedder(splits.train, type, ecfg);
        teachers.embedders.push_back(r.embedder);
        teachers.dictionaries.push_back(r.dictionary);
    }

    ManipConfig cfg;
    cfg.target_attr = "color";
    cfg.epochs = 15;
    cfg.batch_size = 128;
    cfg.hidden = 96;
    cfg.seed = 13;

    flam::ManipTrainResult r =
        flam::train_manipulator(splits.train, teachers, cfg);

    const Embedder& color = teachers.embedders[1];
    const Dictionary& dict = teachers.dictionaries[1];
    const std::size_t classes = data.schema.class_counts[1];
    const Tensor held_out = flam::feature_matrix(splits.gallery.records);

    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < splits.gallery.records.size(); ++i) {
        const std::int32_t from = splits.gallery.records[i].labels[1];
        const std::int32_t to =
            static_cast<std::int32_t>((from + 1) % static_cast<std::int32_t>(classes));
        const Tensor x = Tensor::vector(row_of(held_out, i));
        const Tensor e = flam::dictionary_lookup(dict, static_cast<std::size_t>(to));
        const Tensor moved = flam::generate(r.generator, x, e);
        hits += flam::pseudo_label(color, dict, moved) == to ? 1 : 0;
        ++total;
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(total);
    CHECK(rate >= 0.6);

    // the proxy should see a mostly-recoverable feature once training settles
    CHECK(r.epochs.back().proxy > r.epochs.front().proxy - 0.02);
}
