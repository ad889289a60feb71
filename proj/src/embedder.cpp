#include "flam/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "flam/error.hpp"
#include "flam/io_util.hpp"
#include "flam/optim.hpp"
#include "flam/rng.hpp"

namespace flam {

namespace {

constexpr char kMagic[] = "FLAMEMB";
constexpr std::uint32_t kVersion = 1;

void renormalize_rows(ag::Tensor& m) {
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = m.data().data() + r * cols;
        double norm = 0.0;
        for (std::size_t j = 0; j < cols; ++j) norm += row[j] * row[j];
        norm = std::sqrt(norm) + 1e-12;
        for (std::size_t j = 0; j < cols; ++j) row[j] /= norm;
    }
}

// dist(u,v) - dist(u,w) + mu == cos(u,w) - cos(u,v) + mu
ag::Tensor hinge(const ag::Tensor& anchor, const ag::Tensor& pos,
                 const ag::Tensor& neg, double mu) {
    ag::Tensor cos_p = ag::cosine_sim(anchor, pos);
    ag::Tensor cos_n = ag::cosine_sim(anchor, neg);
    return ag::relu(ag::add_const(ag::sub(cos_n, cos_p), mu));
}

}  // namespace

std::size_t embedding_dim(const Embedder& e) { return nn::output_dim(e.mlp); }
std::size_t feature_dim(const Embedder& e) { return nn::input_dim(e.mlp); }

EmbedderConfig embedder_config_from_json(const nlohmann::json& j) {
    EmbedderConfig c;
    if (j.contains("k")) c.k = j["k"].get<std::size_t>();
    if (j.contains("hidden")) c.hidden = j["hidden"].get<std::size_t>();
    if (j.contains("mu")) c.mu = j["mu"].get<double>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    return c;
}

nlohmann::json embedder_config_to_json(const EmbedderConfig& c) {
    return {{"k", c.k},         {"hidden", c.hidden},
            {"mu", c.mu},       {"lr", c.lr},
            {"epochs", c.epochs}, {"batch_size", c.batch_size},
            {"seed", c.seed}};
}

ag::Tensor embed(const Embedder& embedder, const ag::Tensor& x) {
    const std::size_t D = feature_dim(embedder);
    if (x.rank() > 2 || x.cols() != D) {
        throw ContractError("embed: input " + ag::shape_str(x) +
                            " does not match feature dim " + std::to_string(D));
    }
    if (x.rank() == 1) {
        // single-vector convenience: the row wrap copies values, so gradients
        // reach the network but not x itself
        return nn::forward(embedder.mlp, ag::Tensor({1, D}, x.data()));
    }
    return nn::forward(embedder.mlp, x);
}

ag::Tensor triplet_loss(const ag::Tensor& f, const ag::Tensor& f_plus,
                        const ag::Tensor& f_minus, double mu) {
    if (mu < 0.0) throw ContractError("triplet_loss: mu must be >= 0");
    return hinge(f, f_plus, f_minus, mu);
}

ag::Tensor embedder_loss(const TripletBatch& batch, const Embedder& embedder,
                         const Dictionary& dictionary, double mu) {
    const std::size_t B = batch.anchors.rows();
    if (batch.positives.rows() != B || batch.negatives.rows() != B ||
        batch.anchor_class.size() != B || batch.negative_class.size() != B) {
        throw ContractError("embedder_loss: ragged triplet batch");
    }
    if (B == 0) throw ContractError("embedder_loss: empty batch");
    const std::int32_t class_count =
        static_cast<std::int32_t>(dictionary.vectors.shape()[0]);
    std::vector<std::size_t> a_idx(B), n_idx(B);
    for (std::size_t i = 0; i < B; ++i) {
        const std::int32_t a = batch.anchor_class[i];
        const std::int32_t n = batch.negative_class[i];
        if (a == kAbsent || n == kAbsent) {
            throw ContractError("embedder_loss: unlabeled sample in triple " +
                                std::to_string(i));
        }
        if (a < 0 || a >= class_count || n < 0 || n >= class_count) {
            throw ContractError("embedder_loss: class out of range in triple " +
                                std::to_string(i));
        }
        if (a == n) {
            throw ContractError(
                "embedder_loss: anchor and negative share class " +
                std::to_string(a) + " in triple " + std::to_string(i));
        }
        a_idx[i] = static_cast<std::size_t>(a);
        n_idx[i] = static_cast<std::size_t>(n);
    }
    ag::Tensor e_a = embed(embedder, batch.anchors);
    ag::Tensor e_p = embed(embedder, batch.positives);
    ag::Tensor e_n = embed(embedder, batch.negatives);
    ag::Tensor d_a = ag::gather_rows(dictionary.vectors, a_idx);
    ag::Tensor d_n = ag::gather_rows(dictionary.vectors, n_idx);
    ag::Tensor term_dict_anchor = hinge(d_a, e_p, e_n, mu);
    ag::Tensor term_embed_anchor = hinge(e_a, d_a, d_n, mu);
    return ag::mean(ag::add(term_dict_anchor, term_embed_anchor));
}

ag::Tensor feature_matrix(const std::vector<FeatureRecord>& records) {
    std::vector<std::size_t> all(records.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return feature_matrix(records, all);
}

ag::Tensor feature_matrix(const std::vector<FeatureRecord>& records,
                          const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("feature_matrix: no records");
    const std::size_t D = records.at(indices.front()).feature.size();
    ag::Tensor m({indices.size(), D});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const FeatureRecord& rec = records.at(indices[r]);
        if (rec.feature.size() != D) {
            throw ContractError("feature_matrix: ragged feature dims");
        }
        for (std::size_t d = 0; d < D; ++d) {
            m.data()[r * D + d] = static_cast<double>(rec.feature[d]);
        }
    }
    return m;
}

EmbedderTrainResult train_embedder(const Dataset& train,
                                   std::string_view attr_type,
                                   const EmbedderConfig& config) {
    const std::size_t attr = train.schema.index_of(attr_type);
    const std::size_t class_count = train.schema.class_counts[attr];
    const std::size_t D = train.config.dim;
    const std::size_t k = config.k;
    const std::size_t hidden = config.hidden ? config.hidden : 4 * k;
    if (k == 0 || config.batch_size < 2) {
        throw ConfigError("train_embedder: k and batch_size must be positive");
    }

    std::vector<std::size_t> labeled;
    std::vector<std::size_t> labels;
    std::set<std::int32_t> classes_seen;
    for (std::size_t i = 0; i < train.records.size(); ++i) {
        const std::int32_t l = train.records[i].labels.at(attr);
        if (l == kAbsent) continue;
        labeled.push_back(i);
        labels.push_back(static_cast<std::size_t>(l));
        classes_seen.insert(l);
    }
    if (classes_seen.size() < 2) {
        throw TrainError("train_embedder: need >= 2 labeled classes for '" +
                         std::string(attr_type) + "', found " +
                         std::to_string(classes_seen.size()));
    }

    Rng root = Rng(config.seed).child("embedder").child(attr_type);
    EmbedderTrainResult result;
    result.embedder.attr_type = std::string(attr_type);
    Rng mlp_rng = root.child("mlp");
    result.embedder.mlp =
        nn::make_mlp(mlp_rng, {D, hidden, k}, 0.2, /*activate_output=*/false,
                     /*normalize_output=*/true);
    result.dictionary.attr_type = std::string(attr_type);
    result.dictionary.vectors = ag::Tensor({class_count, k}, true);
    {
        Rng dict_rng = root.child("dict");
        for (double& v : result.dictionary.vectors.data()) v = dict_rng.normal();
        renormalize_rows(result.dictionary.vectors);
    }
    if (config.epochs == 0) return result;

    std::vector<ag::Tensor> params = nn::parameters(result.embedder.mlp);
    params.push_back(result.dictionary.vectors);
    ag::OptimizerState opt = ag::make_adam(params, config.lr);

    const ag::Tensor features = feature_matrix(train.records, labeled);
    Rng shuffle_rng = root.child("shuffle");
    Rng triple_rng = root.child("triples");

    std::vector<std::size_t> order(labeled.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t triple_count = 0;
        for (std::size_t start = 0; start < order.size();
             start += config.batch_size) {
            const std::size_t stop =
                std::min(start + config.batch_size, order.size());
            const std::size_t bsz = stop - start;

            // in-batch triple construction: positive uniform among same-class
            // members, negative uniform among different-class members
            std::vector<std::vector<std::size_t>> by_class(class_count);
            for (std::size_t i = 0; i < bsz; ++i) {
                by_class[labels[order[start + i]]].push_back(i);
            }
            std::vector<std::size_t> a_rows, p_rows, n_rows;
            std::vector<std::int32_t> a_cls, n_cls;
            for (std::size_t i = 0; i < bsz; ++i) {
                const std::size_t cls = labels[order[start + i]];
                const auto& same = by_class[cls];
                if (same.size() < 2 || same.size() == bsz) continue;
                std::size_t p;
                do {
                    p = same[triple_rng.uniform_int(same.size())];
                } while (p == i);
                std::size_t nidx;
                do {
                    nidx = triple_rng.uniform_int(bsz);
                } while (labels[order[start + nidx]] == cls);
                a_rows.push_back(order[start + i]);
                p_rows.push_back(order[start + p]);
                n_rows.push_back(order[start + nidx]);
                a_cls.push_back(static_cast<std::int32_t>(cls));
                n_cls.push_back(
                    static_cast<std::int32_t>(labels[order[start + nidx]]));
            }
            if (a_rows.empty()) continue;

            TripletBatch batch;
            batch.anchors = ag::gather_rows(features, a_rows);
            batch.positives = ag::gather_rows(features, p_rows);
            batch.negatives = ag::gather_rows(features, n_rows);
            batch.anchor_class = a_cls;
            batch.negative_class = n_cls;

            ag::zero_grads(params);
            ag::Tape tape;
            ag::Tensor loss =
                embedder_loss(batch, result.embedder, result.dictionary,
                              config.mu);
            tape.backward(loss);
            ag::adam_step(opt, params);
            renormalize_rows(result.dictionary.vectors);

            loss_sum += loss.item() * static_cast<double>(a_rows.size());
            triple_count += a_rows.size();
        }
        result.epoch_loss.push_back(
            triple_count ? loss_sum / static_cast<double>(triple_count) : 0.0);
    }
    return result;
}

std::vector<std::int32_t> pseudo_label_batch(const Embedder& embedder,
                                             const Dictionary& dictionary,
                                             const ag::Tensor& rows) {
    ag::NoGradGuard ng;
    ag::Tensor e = embed(embedder, rows);
    ag::Tensor dict = dictionary.vectors.detach();
    renormalize_rows(dict);  // cos against rows that may be slightly off-norm
    ag::Tensor sims = ag::matmul_nt(e, dict);
    const std::size_t B = sims.shape()[0], C = sims.shape()[1];
    std::vector<std::int32_t> out(B);
    for (std::size_t r = 0; r < B; ++r) {
        const double* s = sims.data().data() + r * C;
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (s[c] > s[best]) best = c;
        }
        out[r] = static_cast<std::int32_t>(best);
    }
    return out;
}

std::int32_t pseudo_label(const Embedder& embedder, const Dictionary& dictionary,
                          const ag::Tensor& x) {
    return pseudo_label_batch(embedder, dictionary, x).at(0);
}

ag::Tensor dictionary_lookup(const Dictionary& dictionary,
                             std::size_t class_index) {
    const std::size_t rows = dictionary.vectors.shape()[0];
    const std::size_t k = dictionary.vectors.shape()[1];
    if (class_index >= rows) {
        throw ContractError("dictionary_lookup: class " +
                            std::to_string(class_index) + " out of range [0, " +
                            std::to_string(rows) + ")");
    }
    ag::Tensor out({k});
    std::copy_n(dictionary.vectors.data().data() + class_index * k, k,
                out.data().data());
    return out;
}

void save_embedder(const std::filesystem::path& path, const Embedder& embedder,
                   const Dictionary& dictionary, const nlohmann::json& sidecar) {
    std::string buf;
    buf.append(kMagic, 7);
    io::append_u32(buf, kVersion);
    io::append_string(buf, embedder.attr_type);
    io::append_u32(buf, static_cast<std::uint32_t>(embedding_dim(embedder)));
    io::append_f32(buf, static_cast<float>(embedder.mlp.leak));
    io::append_u32(buf, static_cast<std::uint32_t>(embedder.mlp.layers.size()));
    for (const nn::Affine& l : embedder.mlp.layers) {
        io::append_tensor_f32(buf, l.w);
        io::append_tensor_f32(buf, l.b);
    }
    io::append_tensor_f32(buf, dictionary.vectors);
    io::write_file(path, buf);
    if (!sidecar.is_null()) {
        io::write_file(path.string() + ".log.json", sidecar.dump(2) + "\n");
    }
}

LoadedEmbedder load_embedder(const std::filesystem::path& path) {
    io::Reader r(io::read_file(path), path.string());
    r.expect_magic(kMagic, 7);
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        r.fail("unsupported version " + std::to_string(version));
    }
    LoadedEmbedder out;
    out.embedder.attr_type = r.str();
    const std::uint32_t k = r.u32();
    out.embedder.mlp.leak = static_cast<double>(r.f32());
    out.embedder.mlp.normalize_output = true;
    const std::uint32_t n_layers = r.u32();
    if (n_layers == 0 || n_layers > 16) r.fail("implausible layer count");
    std::size_t expect_in = 0;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        nn::Affine layer;
        layer.w = r.tensor_f32();
        layer.b = r.tensor_f32();
        if (layer.w.rank() != 2 || layer.b.rank() != 1 ||
            layer.b.shape()[0] != layer.w.shape()[1]) {
            r.fail("layer " + std::to_string(i) + " shape mismatch");
        }
        if (i > 0 && layer.w.shape()[0] != expect_in) {
            r.fail("layer " + std::to_string(i) + " input dim mismatch");
        }
        expect_in = layer.w.shape()[1];
        out.embedder.mlp.layers.push_back(std::move(layer));
    }
    if (expect_in != k) r.fail("output dim does not match recorded k");
    out.dictionary.attr_type = out.embedder.attr_type;
    out.dictionary.vectors = r.tensor_f32();
    if (out.dictionary.vectors.rank() != 2 ||
        out.dictionary.vectors.shape()[1] != k) {
        r.fail("dictionary shape mismatch");
    }
    r.expect_end();
    return out;
}

}  // namespace flam
