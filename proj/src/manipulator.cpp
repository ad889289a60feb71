#include "flam/manipulator.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "flam/error.hpp"
#include "flam/io_util.hpp"
#include "flam/optim.hpp"
#include "flam/rng.hpp"

namespace flam {

namespace {

constexpr char kMagic[] = "FLAMGAN";
constexpr std::uint32_t kVersion = 1;

ag::Tensor as_rows(const ag::Tensor& t, std::size_t cols, const char* what) {
    if (t.rank() > 2 || t.cols() != cols) {
        throw ContractError(std::string(what) + ": input " + ag::shape_str(t) +
                            " does not match dim " + std::to_string(cols));
    }
    // single-vector convenience: the row wrap copies values, so gradients
    // reach the network but not the wrapped input itself
    if (t.rank() == 1) return ag::Tensor({1, cols}, t.data());
    return t;
}

const Embedder& find_embedder(const Teachers& teachers, const std::string& attr) {
    for (const Embedder& e : teachers.embedders) {
        if (e.attr_type == attr) return e;
    }
    throw ConfigError("manipulator: no embedder for attribute '" + attr + "'");
}

const Dictionary& find_dictionary(const Teachers& teachers,
                                  const std::string& attr) {
    for (const Dictionary& d : teachers.dictionaries) {
        if (d.attr_type == attr) return d;
    }
    throw ConfigError("manipulator: no dictionary for attribute '" + attr + "'");
}

std::vector<ag::Tensor> discriminator_parameters(const Discriminator& d) {
    std::vector<ag::Tensor> params = nn::parameters(d.trunk);
    params.push_back(d.head_rf.w);
    params.push_back(d.head_rf.b);
    params.push_back(d.head_fm.w);
    params.push_back(d.head_fm.b);
    return params;
}

void ensure_finite(double v, const char* term, std::size_t epoch,
                   std::size_t step) {
    if (std::isfinite(v)) return;
    throw TrainError("train_manipulator: " + std::string(term) +
                     " is not finite at epoch " + std::to_string(epoch) +
                     " step " + std::to_string(step));
}

}  // namespace

std::size_t generator_feature_dim(const Generator& g) {
    return nn::output_dim(g.mlp);
}

std::size_t generator_embed_dim(const Generator& g) {
    return nn::input_dim(g.mlp) - nn::output_dim(g.mlp);
}

std::size_t discriminator_feature_dim(const Discriminator& d) {
    return nn::input_dim(d.trunk);
}

std::size_t discriminator_match_dim(const Discriminator& d) {
    return d.head_fm.w.shape()[1];
}

std::string to_string(Matching m) { return m == Matching::M ? "M" : "S"; }
std::string to_string(Sampling s) {
    return s == Sampling::uniform ? "uniform" : "os";
}
std::string to_string(LabelMode l) {
    return l == LabelMode::true_labels ? "true_labels" : "pseudo_labels";
}

Matching matching_from_string(std::string_view s) {
    if (s == "M") return Matching::M;
    if (s == "S") return Matching::S;
    throw ConfigError("matching mode '" + std::string(s) + "' is not M or S");
}

Sampling sampling_from_string(std::string_view s) {
    if (s == "uniform") return Sampling::uniform;
    if (s == "os") return Sampling::os;
    throw ConfigError("sampling '" + std::string(s) + "' is not uniform or os");
}

LabelMode label_mode_from_string(std::string_view s) {
    if (s == "true_labels") return LabelMode::true_labels;
    if (s == "pseudo_labels") return LabelMode::pseudo_labels;
    throw ConfigError("label mode '" + std::string(s) +
                      "' is not true_labels or pseudo_labels");
}

ManipConfig manip_config_from_json(const nlohmann::json& j) {
    ManipConfig c;
    if (j.contains("target_attr")) c.target_attr = j["target_attr"].get<std::string>();
    if (j.contains("remaining_attrs")) {
        c.remaining_attrs = j["remaining_attrs"].get<std::vector<std::string>>();
    }
    if (j.contains("lambda_adv")) c.lambda_adv = j["lambda_adv"].get<double>();
    if (j.contains("lambda_match")) c.lambda_match = j["lambda_match"].get<double>();
    if (j.contains("lambda_cycle")) c.lambda_cycle = j["lambda_cycle"].get<double>();
    if (j.contains("matching")) {
        c.matching = matching_from_string(j["matching"].get<std::string>());
    }
    if (j.contains("sampling")) {
        c.sampling = sampling_from_string(j["sampling"].get<std::string>());
    }
    if (j.contains("label_mode")) {
        c.label_mode = label_mode_from_string(j["label_mode"].get<std::string>());
    }
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("hidden")) c.hidden = j["hidden"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    return c;
}

nlohmann::json manip_config_to_json(const ManipConfig& c) {
    return {{"target_attr", c.target_attr},
            {"remaining_attrs", c.remaining_attrs},
            {"lambda_adv", c.lambda_adv},
            {"lambda_match", c.lambda_match},
            {"lambda_cycle", c.lambda_cycle},
            {"matching", to_string(c.matching)},
            {"sampling", to_string(c.sampling)},
            {"label_mode", to_string(c.label_mode)},
            {"lr", c.lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"hidden", c.hidden},
            {"seed", c.seed}};
}

ag::Tensor generate(const Generator& g, const ag::Tensor& x, const ag::Tensor& e) {
    const std::size_t D = generator_feature_dim(g);
    const std::size_t k = generator_embed_dim(g);
    ag::Tensor xr = as_rows(x, D, "generate");
    ag::Tensor er = as_rows(e, k, "generate");
    if (xr.rows() != er.rows()) {
        throw ContractError("generate: " + std::to_string(xr.rows()) +
                            " features vs " + std::to_string(er.rows()) +
                            " embeddings");
    }
    return nn::forward(g.mlp, ag::concat({xr, er}));
}

ag::Tensor discriminator_logits(const Discriminator& d, const ag::Tensor& x) {
    ag::Tensor h = nn::forward(
        d.trunk, as_rows(x, discriminator_feature_dim(d), "discriminator"));
    return nn::apply(d.head_rf, h);
}

ag::Tensor discriminator_features(const Discriminator& d, const ag::Tensor& x) {
    ag::Tensor h = nn::forward(
        d.trunk, as_rows(x, discriminator_feature_dim(d), "discriminator"));
    return nn::apply(d.head_fm, h);
}

AdvLosses adv_losses(const Discriminator& d, const ag::Tensor& x_real,
                     const ag::Tensor& x_fake) {
    ag::Tensor rf_real = discriminator_logits(d, x_real);
    ag::Tensor rf_fake_const = discriminator_logits(d, x_fake.detach());
    ag::Tensor rf_fake = discriminator_logits(d, x_fake);
    AdvLosses out;
    // -log(1 - sigmoid(z)) == -log_sigmoid(-z)
    out.d_loss = ag::scale(
        ag::add(ag::mean(ag::log_sigmoid(rf_real)),
                ag::mean(ag::log_sigmoid(ag::scale(rf_fake_const, -1.0)))),
        -1.0);
    out.g_loss = ag::scale(ag::mean(ag::log_sigmoid(rf_fake)), -1.0);
    return out;
}

ag::Tensor feature_matching_loss(const Discriminator& d,
                                 const std::vector<Embedder>& embedders,
                                 const ag::Tensor& x, const ag::Tensor& x_minus,
                                 const ag::Tensor& x_tilde, Matching mode) {
    if (embedders.empty()) {
        throw ConfigError("feature_matching_loss: no embedders scheduled");
    }
    const std::size_t k = embedding_dim(embedders.front());
    for (const Embedder& e : embedders) {
        if (embedding_dim(e) != k) {
            throw ConfigError("feature_matching_loss: embedder '" + e.attr_type +
                              "' has k=" + std::to_string(embedding_dim(e)) +
                              ", expected " + std::to_string(k));
        }
    }
    if (discriminator_match_dim(d) != embedders.size() * k) {
        throw ConfigError("feature_matching_loss: matching head width " +
                          std::to_string(discriminator_match_dim(d)) +
                          " does not fit " + std::to_string(embedders.size()) +
                          " blocks of k=" + std::to_string(k));
    }
    const std::size_t D = discriminator_feature_dim(d);
    ag::Tensor xr = as_rows(x, D, "feature_matching_loss");
    ag::Tensor xm = as_rows(x_minus, D, "feature_matching_loss");
    ag::Tensor xt = as_rows(x_tilde, D, "feature_matching_loss");
    const std::size_t B = xr.rows();
    if (xm.rows() != B || xt.rows() != B) {
        throw ContractError("feature_matching_loss: row counts differ");
    }

    ag::Tensor real_target, fake_target;
    {
        ag::NoGradGuard frozen;
        std::vector<ag::Tensor> real_blocks, fake_blocks;
        real_blocks.push_back(embed(embedders.front(), xr));
        fake_blocks.push_back(embed(embedders.front(), xm));
        for (std::size_t i = 1; i < embedders.size(); ++i) {
            ag::Tensor block = embed(embedders[i], xr);
            real_blocks.push_back(block);
            fake_blocks.push_back(block);
        }
        real_target = ag::concat(real_blocks);
        fake_target = ag::concat(fake_blocks);
    }

    ag::Tensor sq_real = ag::squared_diff(discriminator_features(d, xr), real_target);
    ag::Tensor sq_fake = ag::squared_diff(discriminator_features(d, xt), fake_target);
    if (mode == Matching::S && embedders.size() > 1) {
        // restrict both terms to the target block
        ag::Tensor mask({B, embedders.size() * k});
        for (std::size_t r = 0; r < B; ++r) {
            std::fill_n(mask.data().data() + r * embedders.size() * k, k, 1.0);
        }
        sq_real = ag::mul(sq_real, mask);
        sq_fake = ag::mul(sq_fake, mask);
    }
    return ag::scale(ag::add(ag::sum(sq_real), ag::sum(sq_fake)),
                     1.0 / static_cast<double>(B));
}

ag::Tensor cycle_loss(const Generator& g, const Embedder& embedder_a,
                      const ag::Tensor& x, const ag::Tensor& e_minus) {
    ag::Tensor xr = as_rows(x, generator_feature_dim(g), "cycle_loss");
    ag::Tensor e_self;
    {
        ag::NoGradGuard frozen;
        e_self = embed(embedder_a, xr);
    }
    ag::Tensor x_hat = generate(g, generate(g, xr, e_minus), e_self);
    return ag::scale(ag::sum(ag::squared_diff(xr, x_hat)),
                     1.0 / static_cast<double>(xr.rows()));
}

std::ptrdiff_t online_sample(const std::vector<ag::Tensor>& remaining_embeddings,
                             const std::vector<std::int32_t>& target_class,
                             std::size_t anchor) {
    const std::size_t B = target_class.size();
    if (anchor >= B) throw ContractError("online_sample: anchor out of range");
    for (const ag::Tensor& m : remaining_embeddings) {
        if (m.rank() != 2 || m.rows() != B) {
            throw ContractError("online_sample: embedding matrix " +
                                ag::shape_str(m) + " does not cover the batch");
        }
    }
    std::ptrdiff_t best = kNoCandidate;
    double best_cost = 0.0;
    for (std::size_t j = 0; j < B; ++j) {
        if (target_class[j] == target_class[anchor]) continue;
        double cost = 0.0;
        for (const ag::Tensor& m : remaining_embeddings) {
            const std::size_t k = m.cols();
            const double* a = m.data().data() + anchor * k;
            const double* c = m.data().data() + j * k;
            double dot = 0.0, sa = 0.0, sc = 0.0;
            for (std::size_t t = 0; t < k; ++t) {
                dot += a[t] * c[t];
                sa += a[t] * a[t];
                sc += c[t] * c[t];
            }
            cost += 1.0 - dot / ((std::sqrt(sa) + 1e-12) * (std::sqrt(sc) + 1e-12));
        }
        if (best == kNoCandidate || cost < best_cost) {
            best = static_cast<std::ptrdiff_t>(j);
            best_cost = cost;
        }
    }
    return best;
}

double convergence_proxy(const Generator& g, const Embedder& embedder_a,
                         const ag::Tensor& sample_rows, std::uint64_t seed) {
    if (!sample_rows.defined() || sample_rows.size() == 0) {
        throw ContractError("convergence_proxy: empty sample");
    }
    ag::NoGradGuard inference;
    ag::Tensor rows = as_rows(sample_rows, generator_feature_dim(g),
                              "convergence_proxy");
    const std::size_t N = rows.rows();
    Rng rng(seed);
    std::vector<std::size_t> partner(N);
    for (std::size_t i = 0; i < N; ++i) {
        if (N == 1) {
            partner[i] = i;
            continue;
        }
        std::size_t j;
        do {
            j = rng.uniform_int(N);
        } while (j == i);
        partner[i] = j;
    }
    ag::Tensor e_minus = embed(embedder_a, ag::gather_rows(rows, partner));
    ag::Tensor e_self = embed(embedder_a, rows);
    ag::Tensor x_hat = generate(g, generate(g, rows, e_minus), e_self);
    return ag::mean(ag::cosine_sim(rows, x_hat)).item();
}

ManipTrainResult train_manipulator(const Dataset& train, const Teachers& teachers,
                                   const ManipConfig& config) {
    const std::size_t target = train.schema.index_of(config.target_attr);
    const std::size_t D = train.config.dim;
    if (config.lambda_adv < 0 || config.lambda_match < 0 ||
        config.lambda_cycle < 0) {
        throw ConfigError("train_manipulator: negative loss weight");
    }
    if (config.batch_size < 2) {
        throw ConfigError("train_manipulator: batch_size must be >= 2");
    }
    if (config.hidden == 0) {
        throw ConfigError("train_manipulator: hidden must be positive");
    }

    std::vector<std::string> remaining = config.remaining_attrs;
    if (remaining.empty()) {
        for (const std::string& t : train.schema.types) {
            if (t != config.target_attr) remaining.push_back(t);
        }
    } else {
        if (remaining.size() != train.schema.n_types() - 1) {
            throw ConfigError("train_manipulator: remaining_attrs must cover the "
                              "other " +
                              std::to_string(train.schema.n_types() - 1) +
                              " attribute types");
        }
        std::set<std::string> seen;
        for (const std::string& t : remaining) {
            train.schema.index_of(t);
            if (t == config.target_attr || !seen.insert(t).second) {
                throw ConfigError(
                    "train_manipulator: remaining_attrs repeats or targets '" +
                    t + "'");
            }
        }
    }

    // matching head block order: target first, then remaining as scheduled
    std::vector<Embedder> scheduled;
    scheduled.push_back(find_embedder(teachers, config.target_attr));
    for (const std::string& t : remaining) {
        scheduled.push_back(find_embedder(teachers, t));
    }
    const std::size_t k = embedding_dim(scheduled.front());
    for (const Embedder& e : scheduled) {
        if (feature_dim(e) != D) {
            throw ConfigError("train_manipulator: embedder '" + e.attr_type +
                              "' expects dim " + std::to_string(feature_dim(e)) +
                              ", dataset has " + std::to_string(D));
        }
        if (embedding_dim(e) != k) {
            throw ConfigError("train_manipulator: embedder '" + e.attr_type +
                              "' has k=" + std::to_string(embedding_dim(e)) +
                              ", expected " + std::to_string(k));
        }
    }
    const Embedder& teacher_a = scheduled.front();

    // label source for eligibility: true labels only, or pseudo-labels
    // filling the gaps
    std::vector<std::size_t> pool;
    std::vector<std::int32_t> pool_class;
    if (config.label_mode == LabelMode::true_labels) {
        for (std::size_t i = 0; i < train.records.size(); ++i) {
            const std::int32_t l = train.records[i].labels.at(target);
            if (l == kAbsent) continue;
            pool.push_back(i);
            pool_class.push_back(l);
        }
    } else {
        const Dictionary& dict_a = find_dictionary(teachers, config.target_attr);
        if (dict_a.vectors.rank() != 2 || dict_a.vectors.shape()[1] != k) {
            throw ConfigError("train_manipulator: dictionary for '" +
                              config.target_attr + "' does not have k=" +
                              std::to_string(k) + " columns");
        }
        std::vector<std::size_t> absent_pos;
        for (std::size_t i = 0; i < train.records.size(); ++i) {
            pool.push_back(i);
            pool_class.push_back(train.records[i].labels.at(target));
            if (pool_class.back() == kAbsent) absent_pos.push_back(pool.size() - 1);
        }
        if (!absent_pos.empty()) {
            std::vector<std::size_t> absent_records;
            for (std::size_t pos : absent_pos) absent_records.push_back(pool[pos]);
            const std::vector<std::int32_t> filled = pseudo_label_batch(
                teacher_a, dict_a, feature_matrix(train.records, absent_records));
            for (std::size_t i = 0; i < absent_pos.size(); ++i) {
                pool_class[absent_pos[i]] = filled[i];
            }
        }
    }
    std::set<std::int32_t> classes_seen(pool_class.begin(), pool_class.end());
    if (classes_seen.size() < 2) {
        throw TrainError("train_manipulator: need >= 2 target classes for '" +
                         config.target_attr + "', found " +
                         std::to_string(classes_seen.size()));
    }

    Rng root = Rng(config.seed).child("manipulator").child(config.target_attr);
    ManipTrainResult result;
    {
        Rng g_rng = root.child("g");
        result.generator.mlp =
            nn::make_mlp(g_rng, {D + k, config.hidden, config.hidden, D}, 0.2,
                         /*activate_output=*/false, /*normalize_output=*/true);
    }
    {
        Rng d_rng = root.child("d");
        result.discriminator.trunk =
            nn::make_mlp(d_rng, {D, config.hidden, config.hidden}, 0.2,
                         /*activate_output=*/true, /*normalize_output=*/false);
        result.discriminator.head_rf = nn::make_affine(d_rng, config.hidden, 1);
        result.discriminator.head_fm =
            nn::make_affine(d_rng, config.hidden, train.schema.n_types() * k);
    }
    if (config.epochs == 0) return result;

    std::vector<ag::Tensor> g_params = nn::parameters(result.generator.mlp);
    std::vector<ag::Tensor> d_params =
        discriminator_parameters(result.discriminator);
    ag::OptimizerState g_opt = ag::make_adam(g_params, config.lr);
    ag::OptimizerState d_opt = ag::make_adam(d_params, config.lr);

    const ag::Tensor features = feature_matrix(train.records, pool);
    const bool d_step_on = config.lambda_adv > 0 || config.lambda_match > 0;

    // fixed sample and partner seed keep the proxy comparable across epochs
    ag::Tensor proxy_rows;
    std::uint64_t proxy_seed;
    {
        Rng sample_rng = root.child("proxy-sample");
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        sample_rng.shuffle(order);
        order.resize(std::min<std::size_t>(order.size(), 256));
        proxy_rows = ag::gather_rows(features, order);
        proxy_seed = root.child("proxy").next_u64();
    }

    Rng shuffle_rng = root.child("shuffle");
    Rng pairs_rng = root.child("pairs");
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        EpochLog log;
        std::size_t pair_count = 0;
        std::size_t step = 0;
        for (std::size_t start = 0; start < order.size();
             start += config.batch_size, ++step) {
            const std::size_t stop =
                std::min(start + config.batch_size, order.size());
            const std::size_t bsz = stop - start;
            if (bsz < 2) continue;
            std::vector<std::size_t> batch_rows(order.begin() + start,
                                                order.begin() + stop);
            std::vector<std::int32_t> batch_class(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                batch_class[i] = pool_class[batch_rows[i]];
            }

            // pair each anchor with a different-class partner; anchors with
            // no candidate drop out of the step
            std::vector<std::size_t> a_rows, m_rows;
            if (config.sampling == Sampling::os) {
                std::vector<ag::Tensor> rem_embs;
                {
                    ag::NoGradGuard frozen;
                    const ag::Tensor xb = ag::gather_rows(features, batch_rows);
                    for (std::size_t i = 1; i < scheduled.size(); ++i) {
                        rem_embs.push_back(embed(scheduled[i], xb));
                    }
                }
                for (std::size_t i = 0; i < bsz; ++i) {
                    const std::ptrdiff_t j =
                        online_sample(rem_embs, batch_class, i);
                    if (j == kNoCandidate) continue;
                    a_rows.push_back(batch_rows[i]);
                    m_rows.push_back(batch_rows[static_cast<std::size_t>(j)]);
                }
            } else {
                for (std::size_t i = 0; i < bsz; ++i) {
                    bool eligible = false;
                    for (std::size_t j = 0; j < bsz; ++j) {
                        if (batch_class[j] != batch_class[i]) {
                            eligible = true;
                            break;
                        }
                    }
                    if (!eligible) continue;
                    std::size_t j;
                    do {
                        j = pairs_rng.uniform_int(bsz);
                    } while (batch_class[j] == batch_class[i]);
                    a_rows.push_back(batch_rows[i]);
                    m_rows.push_back(batch_rows[j]);
                }
            }
            if (a_rows.empty()) continue;
            const double B = static_cast<double>(a_rows.size());

            const ag::Tensor x = ag::gather_rows(features, a_rows);
            const ag::Tensor x_minus = ag::gather_rows(features, m_rows);
            ag::Tensor e_minus;
            {
                ag::NoGradGuard frozen;
                e_minus = embed(teacher_a, x_minus);
            }

            if (d_step_on) {
                ag::Tensor x_fake;
                {
                    ag::NoGradGuard frozen;
                    x_fake = generate(result.generator, x, e_minus);
                }
                ag::zero_grads(d_params);
                ag::Tape tape;
                ag::Tensor total;
                if (config.lambda_adv > 0) {
                    AdvLosses adv = adv_losses(result.discriminator, x, x_fake);
                    ensure_finite(adv.d_loss.item(), "d_loss", epoch, step);
                    log.d_adv += adv.d_loss.item() * B;
                    total = adv.d_loss;
                }
                if (config.lambda_match > 0) {
                    ag::Tensor fm = feature_matching_loss(
                        result.discriminator, scheduled, x, x_minus, x_fake,
                        config.matching);
                    ensure_finite(fm.item(), "matching loss", epoch, step);
                    ag::Tensor weighted = ag::scale(fm, config.lambda_match);
                    total = total.defined() ? ag::add(total, weighted) : weighted;
                }
                tape.backward(total);
                ag::adam_step(d_opt, d_params);
            }

            ag::zero_grads(g_params);
            ag::Tape tape;
            ag::Tensor total;
            ag::Tensor x_tilde;
            if (config.lambda_adv > 0 || config.lambda_match > 0) {
                x_tilde = generate(result.generator, x, e_minus);
            }
            if (config.lambda_adv > 0) {
                AdvLosses adv = adv_losses(result.discriminator, x, x_tilde);
                ensure_finite(adv.g_loss.item(), "g_loss", epoch, step);
                log.g_adv += adv.g_loss.item() * B;
                total = ag::scale(adv.g_loss, config.lambda_adv);
            }
            if (config.lambda_match > 0) {
                ag::Tensor fm = feature_matching_loss(
                    result.discriminator, scheduled, x, x_minus, x_tilde,
                    config.matching);
                ensure_finite(fm.item(), "matching loss", epoch, step);
                log.match += fm.item() * B;
                ag::Tensor weighted = ag::scale(fm, config.lambda_match);
                total = total.defined() ? ag::add(total, weighted) : weighted;
            }
            if (config.lambda_cycle > 0) {
                ag::Tensor cyc =
                    cycle_loss(result.generator, teacher_a, x, e_minus);
                ensure_finite(cyc.item(), "cycle loss", epoch, step);
                log.cycle += cyc.item() * B;
                ag::Tensor weighted = ag::scale(cyc, config.lambda_cycle);
                total = total.defined() ? ag::add(total, weighted) : weighted;
            }
            if (total.defined()) {
                tape.backward(total);
                ag::adam_step(g_opt, g_params);
            }
            pair_count += a_rows.size();
        }
        if (pair_count > 0) {
            const double denom = static_cast<double>(pair_count);
            log.d_adv /= denom;
            log.g_adv /= denom;
            log.match /= denom;
            log.cycle /= denom;
        }
        log.proxy = convergence_proxy(result.generator, teacher_a, proxy_rows,
                                      proxy_seed);
        result.epochs.push_back(log);
    }
    return result;
}

void save_manipulator(const std::filesystem::path& path, const Generator& g,
                      const Discriminator& d, const nlohmann::json& sidecar) {
    const std::size_t D = generator_feature_dim(g);
    const std::size_t k = generator_embed_dim(g);
    const std::size_t match_dim = discriminator_match_dim(d);
    if (k == 0 || match_dim % k != 0) {
        throw ContractError("save_manipulator: matching head width " +
                            std::to_string(match_dim) +
                            " is not a multiple of k=" + std::to_string(k));
    }
    std::string buf;
    buf.append(kMagic, 7);
    io::append_u32(buf, kVersion);
    io::append_u32(buf, static_cast<std::uint32_t>(D));
    io::append_u32(buf, static_cast<std::uint32_t>(k));
    io::append_u32(buf, static_cast<std::uint32_t>(match_dim / k));
    io::append_f32(buf, static_cast<float>(g.mlp.leak));
    io::append_u32(buf, static_cast<std::uint32_t>(g.mlp.layers.size()));
    for (const nn::Affine& l : g.mlp.layers) {
        io::append_tensor_f32(buf, l.w);
        io::append_tensor_f32(buf, l.b);
    }
    io::append_f32(buf, static_cast<float>(d.trunk.leak));
    io::append_u32(buf, static_cast<std::uint32_t>(d.trunk.layers.size()));
    for (const nn::Affine& l : d.trunk.layers) {
        io::append_tensor_f32(buf, l.w);
        io::append_tensor_f32(buf, l.b);
    }
    io::append_tensor_f32(buf, d.head_rf.w);
    io::append_tensor_f32(buf, d.head_rf.b);
    io::append_tensor_f32(buf, d.head_fm.w);
    io::append_tensor_f32(buf, d.head_fm.b);
    io::write_file(path, buf);
    if (!sidecar.is_null()) {
        io::write_file(path.string() + ".log.json", sidecar.dump(2) + "\n");
    }
}

namespace {

nn::Mlp read_mlp(io::Reader& r, std::size_t expect_in, std::size_t expect_out,
                 bool activate_output, bool normalize_output, const char* what) {
    nn::Mlp mlp;
    mlp.leak = static_cast<double>(r.f32());
    mlp.activate_output = activate_output;
    mlp.normalize_output = normalize_output;
    const std::uint32_t n_layers = r.u32();
    if (n_layers == 0 || n_layers > 16) {
        r.fail(std::string(what) + ": implausible layer count");
    }
    std::size_t in = expect_in;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        nn::Affine layer;
        layer.w = r.tensor_f32();
        layer.b = r.tensor_f32();
        if (layer.w.rank() != 2 || layer.b.rank() != 1 ||
            layer.b.shape()[0] != layer.w.shape()[1] ||
            layer.w.shape()[0] != in) {
            r.fail(std::string(what) + ": layer " + std::to_string(i) +
                   " shape mismatch");
        }
        in = layer.w.shape()[1];
        mlp.layers.push_back(std::move(layer));
    }
    if (expect_out != 0 && in != expect_out) {
        r.fail(std::string(what) + ": output dim " + std::to_string(in) +
               ", expected " + std::to_string(expect_out));
    }
    return mlp;
}

nn::Affine read_affine(io::Reader& r, std::size_t expect_in,
                       std::size_t expect_out, const char* what) {
    nn::Affine layer;
    layer.w = r.tensor_f32();
    layer.b = r.tensor_f32();
    if (layer.w.rank() != 2 || layer.b.rank() != 1 ||
        layer.w.shape()[0] != expect_in || layer.w.shape()[1] != expect_out ||
        layer.b.shape()[0] != expect_out) {
        r.fail(std::string(what) + ": head shape mismatch");
    }
    return layer;
}

}  // namespace

LoadedManipulator load_manipulator(const std::filesystem::path& path) {
    io::Reader r(io::read_file(path), path.string());
    r.expect_magic(kMagic, 7);
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        r.fail("unsupported version " + std::to_string(version));
    }
    const std::uint32_t D = r.u32();
    const std::uint32_t k = r.u32();
    const std::uint32_t n = r.u32();
    if (D == 0 || k == 0 || n == 0) r.fail("degenerate dimensions");
    LoadedManipulator out;
    out.generator.mlp = read_mlp(r, D + k, D, false, true, "generator");
    // trunk output width is whatever the file says; heads must agree with it
    out.discriminator.trunk = read_mlp(r, D, 0, true, false, "trunk");
    const std::size_t trunk_out = nn::output_dim(out.discriminator.trunk);
    out.discriminator.head_rf = read_affine(r, trunk_out, 1, "realness");
    out.discriminator.head_fm =
        read_affine(r, trunk_out, static_cast<std::size_t>(n) * k, "matching");
    r.expect_end();
    return out;
}

}  // namespace flam
