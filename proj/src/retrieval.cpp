#include "flam/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <sstream>
#include <unordered_set>

#include "flam/error.hpp"
#include "flam/io_util.hpp"
#include "flam/optim.hpp"
#include "flam/rng.hpp"

namespace flam {

namespace {

const Dictionary& find_dictionary(const std::vector<Dictionary>& dictionaries,
                                  std::string_view attr_type) {
    for (const Dictionary& d : dictionaries) {
        if (d.attr_type == attr_type) return d;
    }
    throw ConfigError("retrieval: no dictionary for attribute '" +
                      std::string(attr_type) + "'");
}

std::vector<double> query_direction(const ag::Tensor& q, std::size_t dim,
                                    const char* what) {
    const bool row_shaped = q.rank() == 2 && q.rows() == 1;
    if (!(q.rank() == 1 || row_shaped) || q.cols() != dim) {
        throw ContractError(std::string(what) + ": query must be a single " +
                            std::to_string(dim) + "-dim feature");
    }
    std::vector<double> out(q.data().begin(), q.data().end());
    double norm = 0.0;
    for (double v : out) norm += v * v;
    norm = std::sqrt(norm) + 1e-12;
    for (double& v : out) v /= norm;
    return out;
}

void require_full_labels(const FeatureRecord& rec, std::size_t record_pos,
                         const char* what) {
    for (std::int32_t label : rec.labels) {
        if (label == kAbsent) {
            throw DataError(std::string(what) + ": query record " +
                            std::to_string(record_pos) + " (instance " +
                            std::to_string(rec.instance_id) +
                            ") is not fully labeled");
        }
    }
}

void require_same_schema(const AttributeSchema& a, const AttributeSchema& b,
                         const char* what) {
    if (a.types != b.types || a.class_counts != b.class_counts) {
        throw ConfigError(std::string(what) +
                          ": datasets disagree on the attribute schema");
    }
}

// Sorted class values of `attr` present in the index.
std::vector<std::int32_t> classes_in_gallery(const RetrievalIndex& index,
                                             std::size_t attr_index) {
    std::set<std::int32_t> seen;
    for (const auto& row : index.labels) {
        if (row[attr_index] != kAbsent) seen.insert(row[attr_index]);
    }
    return {seen.begin(), seen.end()};
}

std::int32_t draw_target(Rng& rng, const std::vector<std::int32_t>& classes,
                         std::int32_t current, const char* what) {
    std::vector<std::int32_t> candidates;
    candidates.reserve(classes.size());
    for (std::int32_t c : classes) {
        if (c != current) candidates.push_back(c);
    }
    if (candidates.empty()) {
        throw DataError(std::string(what) +
                        ": no alternative target class to draw");
    }
    return candidates[rng.uniform_int(candidates.size())];
}

struct TaskRun {
    std::vector<std::size_t> first_hit;  // 1-based rank per query, 0 = none
    std::vector<std::int32_t> targets;   // drawn class per query
    ag::Tensor manipulated;              // queries x D
    std::size_t evaluated = 0;
    std::size_t unreachable = 0;
};

// Shared body of top_k_accuracy and the evaluation driver: one manipulation
// task measured to depth k.
TaskRun run_task(const RetrievalIndex& index, const Dataset& queries,
                 const Generator& g,
                 const std::vector<Dictionary>& dictionaries,
                 std::string_view attr_type, std::size_t k,
                 std::uint64_t seed) {
    require_same_schema(index.schema, queries.schema, "top_k_accuracy");
    const std::size_t attr_index = index.schema.index_of(attr_type);
    const std::vector<std::int32_t> classes =
        classes_in_gallery(index, attr_index);
    std::set<std::vector<std::int32_t>> gallery_triples(index.labels.begin(),
                                                        index.labels.end());

    const std::size_t dim = index.gallery.cols();
    Rng rng = Rng(seed).child(std::string(attr_type));
    TaskRun run;
    run.manipulated = ag::Tensor({queries.records.size(), dim});
    for (std::size_t qi = 0; qi < queries.records.size(); ++qi) {
        const FeatureRecord& rec = queries.records[qi];
        require_full_labels(rec, qi, "top_k_accuracy");
        const std::int32_t target =
            draw_target(rng, classes, rec.labels[attr_index], "top_k_accuracy");
        run.targets.push_back(target);

        ag::Tensor x({dim});
        std::copy(rec.feature.begin(), rec.feature.end(), x.data().begin());
        const ag::Tensor moved = manipulate_query(
            g, dictionaries, x, attr_type, static_cast<std::size_t>(target));
        std::copy(moved.data().begin(), moved.data().end(),
                  run.manipulated.data().begin() + qi * dim);

        std::vector<std::int32_t> demanded = rec.labels;
        demanded[attr_index] = target;
        run.evaluated += 1;
        if (gallery_triples.find(demanded) == gallery_triples.end()) {
            // no gallery row carries the demanded triple, a hit is impossible
            run.unreachable += 1;
            run.first_hit.push_back(0);
            continue;
        }
        const SearchResult found = search(index, moved, k);
        std::size_t rank = 0;
        for (std::size_t h = 0; h < found.hits.size(); ++h) {
            if (index.labels[found.hits[h].row] == demanded) {
                rank = h + 1;
                break;
            }
        }
        run.first_hit.push_back(rank);
    }
    return run;
}

std::vector<std::size_t> normalized_ks(const std::vector<std::size_t>& ks) {
    if (ks.empty()) {
        throw ConfigError("evaluation: at least one k is required");
    }
    std::vector<std::size_t> out = ks;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (out.front() == 0) {
        throw ConfigError("evaluation: k must be >= 1");
    }
    return out;
}

}  // namespace

RetrievalIndex build_index(const Dataset& gallery) {
    if (gallery.records.empty()) {
        throw DataError("build_index: the gallery has no records");
    }
    const std::size_t dim = gallery.records.front().feature.size();
    RetrievalIndex index;
    index.schema = gallery.schema;
    index.gallery = ag::Tensor({gallery.records.size(), dim});
    index.instance_ids.reserve(gallery.records.size());
    index.labels.reserve(gallery.records.size());
    for (std::size_t r = 0; r < gallery.records.size(); ++r) {
        const FeatureRecord& rec = gallery.records[r];
        if (rec.feature.size() != dim) {
            throw DataError("build_index: record " + std::to_string(r) +
                            " has dimension " +
                            std::to_string(rec.feature.size()) + ", expected " +
                            std::to_string(dim));
        }
        double norm = 0.0;
        for (float v : rec.feature) {
            norm += static_cast<double>(v) * static_cast<double>(v);
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            throw DataError("build_index: record " + std::to_string(r) +
                            " (instance " + std::to_string(rec.instance_id) +
                            ") has a zero-norm feature");
        }
        // near-unit rows keep their stored bits, anything else is rescaled
        const double scale = std::abs(norm - 1.0) <= 1e-6 ? 1.0 : 1.0 / norm;
        double* row = index.gallery.data().data() + r * dim;
        for (std::size_t c = 0; c < dim; ++c) {
            row[c] = static_cast<double>(rec.feature[c]) * scale;
        }
        index.instance_ids.push_back(rec.instance_id);
        index.labels.push_back(rec.labels);
    }
    return index;
}

std::string index_digest(const RetrievalIndex& index) {
    std::string bytes;
    bytes.append("FLAMIDX");
    io::append_u64(bytes, index.gallery.rows());
    io::append_u64(bytes, index.gallery.cols());
    const auto& data = index.gallery.data();
    bytes.append(reinterpret_cast<const char*>(data.data()),
                 data.size() * sizeof(double));
    for (std::uint64_t id : index.instance_ids) io::append_u64(bytes, id);
    for (const auto& row : index.labels) {
        for (std::int32_t label : row) {
            io::append_u32(bytes, static_cast<std::uint32_t>(label));
        }
    }
    return io::sha256_hex(bytes.data(), bytes.size());
}

SearchResult search(const RetrievalIndex& index, const ag::Tensor& q,
                    std::size_t k) {
    if (k == 0) {
        throw ContractError("search: k must be >= 1");
    }
    const std::size_t rows = index.gallery.rows();
    const std::size_t dim = index.gallery.cols();
    const std::vector<double> dir = query_direction(q, dim, "search");

    std::vector<double> sims(rows);
    const double* g = index.gallery.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* row = g + r * dim;
        for (std::size_t c = 0; c < dim; ++c) acc += dir[c] * row[c];
        sims[r] = acc;
    }

    SearchResult result;
    result.truncated = k > rows;
    const std::size_t keep = std::min(k, rows);
    std::vector<std::size_t> order(rows);
    for (std::size_t r = 0; r < rows; ++r) order[r] = r;
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (sims[a] != sims[b]) return sims[a] > sims[b];
                          return a < b;
                      });
    result.hits.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        result.hits.push_back(
            {order[i], index.instance_ids[order[i]], sims[order[i]]});
    }
    return result;
}

ag::Tensor manipulate_query(const Generator& g,
                            const std::vector<Dictionary>& dictionaries,
                            const ag::Tensor& x, std::string_view attr_type,
                            std::size_t target_class) {
    const Dictionary& dict = find_dictionary(dictionaries, attr_type);
    return generate(g, x, dictionary_lookup(dict, target_class));
}

RecallResult recall_at_k(const RetrievalIndex& index, const Dataset& queries,
                         std::size_t k) {
    if (k == 0) {
        throw ContractError("recall_at_k: k must be >= 1");
    }
    const std::unordered_set<std::uint64_t> gallery_instances(
        index.instance_ids.begin(), index.instance_ids.end());
    const std::size_t dim = index.gallery.cols();
    RecallResult result;
    for (const FeatureRecord& rec : queries.records) {
        if (gallery_instances.find(rec.instance_id) ==
            gallery_instances.end()) {
            result.excluded += 1;
            continue;
        }
        result.evaluated += 1;
        ag::Tensor x({dim});
        std::copy(rec.feature.begin(), rec.feature.end(), x.data().begin());
        const SearchResult found = search(index, x, k);
        for (const SearchHit& hit : found.hits) {
            if (hit.instance_id == rec.instance_id) {
                result.hits += 1;
                break;
            }
        }
    }
    result.recall = result.evaluated == 0
                        ? 0.0
                        : static_cast<double>(result.hits) /
                              static_cast<double>(result.evaluated);
    return result;
}

TopKResult top_k_accuracy(const RetrievalIndex& index, const Dataset& queries,
                          const Generator& g,
                          const std::vector<Dictionary>& dictionaries,
                          std::string_view attr_type, std::size_t k,
                          std::uint64_t seed) {
    if (k == 0) {
        throw ContractError("top_k_accuracy: k must be >= 1");
    }
    const TaskRun run =
        run_task(index, queries, g, dictionaries, attr_type, k, seed);
    TopKResult result;
    result.evaluated = run.evaluated;
    result.unreachable = run.unreachable;
    for (std::size_t rank : run.first_hit) {
        if (rank >= 1 && rank <= k) result.hits += 1;
    }
    result.accuracy = result.evaluated == 0
                          ? 0.0
                          : static_cast<double>(result.hits) /
                                static_cast<double>(result.evaluated);
    return result;
}

ProbeConfig probe_config_from_json(const nlohmann::json& j) {
    ProbeConfig c;
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    return c;
}

nlohmann::json probe_config_to_json(const ProbeConfig& c) {
    return {{"lr", c.lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"seed", c.seed}};
}

LinearProbe train_probe(const Dataset& train, const ProbeConfig& config) {
    if (config.lr <= 0.0) {
        throw ConfigError("train_probe: lr must be positive");
    }
    if (config.batch_size == 0) {
        throw ConfigError("train_probe: batch_size must be >= 1");
    }
    if (train.records.empty()) {
        throw DataError("train_probe: the training split has no records");
    }
    const std::size_t dim = train.records.front().feature.size();
    Rng root = Rng(config.seed).child("probe");

    LinearProbe probe;
    probe.schema = train.schema;
    for (std::size_t a = 0; a < train.schema.n_types(); ++a) {
        const std::string& attr = train.schema.types[a];
        std::vector<std::size_t> rows;
        std::vector<std::size_t> classes;
        for (std::size_t r = 0; r < train.records.size(); ++r) {
            const std::int32_t label = train.records[r].labels[a];
            if (label == kAbsent) continue;
            rows.push_back(r);
            classes.push_back(static_cast<std::size_t>(label));
        }
        if (rows.empty()) {
            throw TrainError("train_probe: no labeled records for '" + attr +
                             "'");
        }
        Rng attr_rng = root.child(attr);
        nn::Affine head =
            nn::make_affine(attr_rng, dim, train.schema.class_counts[a]);
        const ag::Tensor features = feature_matrix(train.records, rows);
        std::vector<ag::Tensor> params = {head.w, head.b};
        ag::OptimizerState opt = ag::make_adam(params, config.lr);

        Rng shuffle_rng = attr_rng.child("shuffle");
        std::vector<std::size_t> order(rows.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
            shuffle_rng.shuffle(order);
            for (std::size_t start = 0; start < order.size();
                 start += config.batch_size) {
                const std::size_t stop =
                    std::min(order.size(), start + config.batch_size);
                std::vector<std::size_t> batch(order.begin() + start,
                                               order.begin() + stop);
                std::vector<std::size_t> targets;
                targets.reserve(batch.size());
                for (std::size_t pos : batch) targets.push_back(classes[pos]);
                ag::zero_grads(params);
                ag::Tape tape;
                ag::Tensor logits = ag::add(
                    ag::matmul(ag::gather_rows(features, batch), head.w),
                    head.b);
                ag::Tensor loss = ag::softmax_cross_entropy(logits, targets);
                tape.backward(loss);
                ag::adam_step(opt, params);
            }
        }
        probe.heads.push_back(head);
    }
    return probe;
}

std::vector<std::int32_t> probe_predict(const LinearProbe& probe,
                                        std::size_t attr_index,
                                        const ag::Tensor& rows) {
    if (attr_index >= probe.heads.size()) {
        throw ContractError("probe_predict: attribute index " +
                            std::to_string(attr_index) + " out of range [0, " +
                            std::to_string(probe.heads.size()) + ")");
    }
    const nn::Affine& head = probe.heads[attr_index];
    ag::Tensor input = rows;
    if (input.rank() == 1) {
        ag::Tensor wrapped({1, input.size()});
        wrapped.data() = input.data();
        input = wrapped;
    }
    if (input.rank() != 2 || input.cols() != head.w.shape()[0]) {
        throw ContractError("probe_predict: rows must have dimension " +
                            std::to_string(head.w.shape()[0]));
    }
    ag::NoGradGuard guard;
    const ag::Tensor logits = ag::add(ag::matmul(input, head.w), head.b);
    const std::size_t classes = logits.cols();
    std::vector<std::int32_t> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const double* row = logits.data().data() + r * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (row[c] > row[best]) best = c;
        }
        out[r] = static_cast<std::int32_t>(best);
    }
    return out;
}

ProbeDeltaReport probe_delta(const LinearProbe& probe, const Dataset& queries,
                             const Generator& g,
                             const std::vector<Dictionary>& dictionaries,
                             std::uint64_t seed) {
    require_same_schema(probe.schema, queries.schema, "probe_delta");
    if (queries.records.empty()) {
        throw DataError("probe_delta: no query records");
    }
    const std::size_t n = probe.schema.n_types();
    const std::size_t q_count = queries.records.size();
    const std::size_t dim = queries.records.front().feature.size();
    const ag::Tensor originals = feature_matrix(queries.records);

    // all-class candidate lists make the draws line up with top_k_accuracy
    // whenever every class appears in the gallery
    std::vector<std::vector<std::int32_t>> all_classes(n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t c = 0; c < probe.schema.class_counts[a]; ++c) {
            all_classes[a].push_back(static_cast<std::int32_t>(c));
        }
    }

    std::vector<std::vector<std::int32_t>> original_preds(n);
    for (std::size_t m = 0; m < n; ++m) {
        original_preds[m] = probe_predict(probe, m, originals);
    }

    ProbeDeltaReport report;
    report.attrs = probe.schema.types;
    double delta_sum = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const std::string& attr = probe.schema.types[t];
        Rng rng = Rng(seed).child(attr);
        std::vector<std::int32_t> targets;
        ag::Tensor manipulated({q_count, dim});
        for (std::size_t qi = 0; qi < q_count; ++qi) {
            const FeatureRecord& rec = queries.records[qi];
            require_full_labels(rec, qi, "probe_delta");
            const std::int32_t target =
                draw_target(rng, all_classes[t], rec.labels[t], "probe_delta");
            targets.push_back(target);
            ag::Tensor x({dim});
            std::copy(rec.feature.begin(), rec.feature.end(),
                      x.data().begin());
            const ag::Tensor moved =
                manipulate_query(g, dictionaries, x, attr,
                                 static_cast<std::size_t>(target));
            std::copy(moved.data().begin(), moved.data().end(),
                      manipulated.data().begin() + qi * dim);
        }

        std::vector<ProbeCell> cells(n);
        for (std::size_t m = 0; m < n; ++m) {
            const std::vector<std::int32_t> moved_preds =
                probe_predict(probe, m, manipulated);
            std::size_t orig_hits = 0, moved_hits = 0;
            for (std::size_t qi = 0; qi < q_count; ++qi) {
                const std::int32_t intended =
                    m == t ? targets[qi] : queries.records[qi].labels[m];
                orig_hits += original_preds[m][qi] == intended ? 1 : 0;
                moved_hits += moved_preds[qi] == intended ? 1 : 0;
            }
            cells[m].original =
                static_cast<double>(orig_hits) / static_cast<double>(q_count);
            cells[m].manipulated =
                static_cast<double>(moved_hits) / static_cast<double>(q_count);
        }
        delta_sum += cells[t].manipulated - cells[t].original;
        report.cells.push_back(std::move(cells));
    }
    report.avg_delta = delta_sum / static_cast<double>(n);
    return report;
}

std::vector<ClusterStat> cluster_stats(
    const std::vector<Embedder>& embedders, const ag::Tensor& features,
    const std::vector<std::vector<std::int32_t>>& labels) {
    if (embedders.empty()) {
        throw ConfigError("cluster_stats: at least one embedder is required");
    }
    if (features.rank() != 2 || features.rows() != labels.size()) {
        throw ContractError(
            "cluster_stats: features and labels must align row for row");
    }
    for (const auto& row : labels) {
        if (row.size() != embedders.size()) {
            throw ContractError(
                "cluster_stats: each label row needs one entry per embedder");
        }
    }

    ag::NoGradGuard guard;
    std::vector<ClusterStat> stats;
    for (std::size_t a = 0; a < embedders.size(); ++a) {
        ClusterStat stat;
        stat.attr_type = embedders[a].attr_type;
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < labels.size(); ++r) {
            if (labels[r][a] != kAbsent) rows.push_back(r);
        }
        if (rows.size() >= 2) {
            const ag::Tensor embedded =
                embed(embedders[a], ag::gather_rows(features, rows));
            const std::size_t k = embedded.cols();
            // embeddings are unit-norm, so pairwise dot products are cosines;
            // per-class sum vectors give the pair sums in closed form
            std::map<std::int32_t, std::vector<double>> class_sum;
            std::map<std::int32_t, double> class_sq;
            std::map<std::int32_t, std::size_t> class_count;
            std::vector<double> total_sum(k, 0.0);
            double total_sq = 0.0;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const std::int32_t cls = labels[rows[i]][a];
                auto& sum = class_sum[cls];
                sum.resize(k, 0.0);
                const double* e = embedded.data().data() + i * k;
                for (std::size_t c = 0; c < k; ++c) {
                    sum[c] += e[c];
                    total_sum[c] += e[c];
                }
                double sq = 0.0;
                for (std::size_t c = 0; c < k; ++c) sq += e[c] * e[c];
                class_sq[cls] += sq;
                total_sq += sq;
                class_count[cls] += 1;
            }
            double intra_sum = 0.0, within_sum = 0.0;
            std::size_t within_pairs = 0;
            for (const auto& [cls, sum] : class_sum) {
                double norm_sq = 0.0;
                for (double v : sum) norm_sq += v * v;
                const double pair_sum = (norm_sq - class_sq[cls]) / 2.0;
                const std::size_t m = class_count[cls];
                within_sum += pair_sum;
                within_pairs += m * (m - 1) / 2;
                if (m >= 2) {
                    intra_sum += pair_sum;
                    stat.intra_pairs += m * (m - 1) / 2;
                }
            }
            double total_norm_sq = 0.0;
            for (double v : total_sum) total_norm_sq += v * v;
            const double all_pair_sum = (total_norm_sq - total_sq) / 2.0;
            stat.inter_pairs = rows.size() * (rows.size() - 1) / 2 - within_pairs;
            if (stat.intra_pairs > 0) {
                stat.intra = intra_sum / static_cast<double>(stat.intra_pairs);
            }
            if (stat.inter_pairs > 0) {
                stat.inter = (all_pair_sum - within_sum) /
                             static_cast<double>(stat.inter_pairs);
            }
        }
        stats.push_back(std::move(stat));
    }
    return stats;
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
    EvalConfig c;
    if (j.contains("ks")) {
        c.ks = j.at("ks").get<std::vector<std::size_t>>();
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("probe")) {
        c.probe = probe_config_from_json(j.at("probe"));
    }
    return c;
}

nlohmann::json eval_config_to_json(const EvalConfig& c) {
    return {{"ks", c.ks},
            {"seed", c.seed},
            {"probe", probe_config_to_json(c.probe)}};
}

EvalReport run_evaluation(const Dataset& train, const Dataset& queries,
                          const Dataset& gallery, const Teachers& teachers,
                          const Generator& g, const EvalConfig& config) {
    require_same_schema(train.schema, queries.schema, "run_evaluation");
    require_same_schema(train.schema, gallery.schema, "run_evaluation");
    if (queries.records.empty()) {
        throw DataError("run_evaluation: no query records");
    }

    EvalReport report;
    report.ks = normalized_ks(config.ks);
    const std::size_t k_max = report.ks.back();
    const RetrievalIndex index = build_index(gallery);
    report.gallery_rows = index.gallery.rows();
    report.query_rows = queries.records.size();
    report.attrs = train.schema.types;

    // instance recall from one deep search per query
    {
        const std::unordered_set<std::uint64_t> gallery_instances(
            index.instance_ids.begin(), index.instance_ids.end());
        const std::size_t dim = index.gallery.cols();
        std::vector<std::size_t> first_hit;
        for (const FeatureRecord& rec : queries.records) {
            if (gallery_instances.find(rec.instance_id) ==
                gallery_instances.end()) {
                report.r_excluded += 1;
                continue;
            }
            report.r_evaluated += 1;
            ag::Tensor x({dim});
            std::copy(rec.feature.begin(), rec.feature.end(),
                      x.data().begin());
            const SearchResult found = search(index, x, k_max);
            std::size_t rank = 0;
            for (std::size_t h = 0; h < found.hits.size(); ++h) {
                if (found.hits[h].instance_id == rec.instance_id) {
                    rank = h + 1;
                    break;
                }
            }
            first_hit.push_back(rank);
        }
        for (std::size_t k : report.ks) {
            std::size_t hits = 0;
            for (std::size_t rank : first_hit) {
                if (rank >= 1 && rank <= k) hits += 1;
            }
            report.r_at_k.push_back(report.r_evaluated == 0
                                        ? 0.0
                                        : static_cast<double>(hits) /
                                              static_cast<double>(
                                                  report.r_evaluated));
        }
    }

    // the three manipulation tasks, each measured to every k
    std::size_t pooled_evaluated = 0;
    std::vector<std::size_t> pooled_hits(report.ks.size(), 0);
    std::vector<ag::Tensor> manipulated_sets;
    std::vector<std::vector<std::int32_t>> target_sets;
    for (const std::string& attr : report.attrs) {
        const TaskRun run = run_task(index, queries, g, teachers.dictionaries,
                                     attr, k_max, config.seed);
        std::vector<double> accs;
        for (std::size_t ki = 0; ki < report.ks.size(); ++ki) {
            std::size_t hits = 0;
            for (std::size_t rank : run.first_hit) {
                if (rank >= 1 && rank <= report.ks[ki]) hits += 1;
            }
            pooled_hits[ki] += hits;
            accs.push_back(run.evaluated == 0
                               ? 0.0
                               : static_cast<double>(hits) /
                                     static_cast<double>(run.evaluated));
        }
        pooled_evaluated += run.evaluated;
        report.t_at_k.push_back(std::move(accs));
        report.t_unreachable.push_back(run.unreachable);
        report.unreachable_count += run.unreachable;
        manipulated_sets.push_back(run.manipulated);
        target_sets.push_back(run.targets);
    }
    for (std::size_t ki = 0; ki < report.ks.size(); ++ki) {
        report.t_all.push_back(pooled_evaluated == 0
                                   ? 0.0
                                   : static_cast<double>(pooled_hits[ki]) /
                                         static_cast<double>(pooled_evaluated));
    }

    const LinearProbe probe = train_probe(train, config.probe);
    report.probe =
        probe_delta(probe, queries, g, teachers.dictionaries, config.seed);

    // cluster statistics before and after each task's manipulation
    std::vector<std::vector<std::int32_t>> query_labels;
    for (const FeatureRecord& rec : queries.records) {
        query_labels.push_back(rec.labels);
    }
    report.clusters.pre = cluster_stats(
        teachers.embedders, feature_matrix(queries.records), query_labels);
    for (std::size_t t = 0; t < report.attrs.size(); ++t) {
        std::vector<std::vector<std::int32_t>> intended = query_labels;
        for (std::size_t qi = 0; qi < intended.size(); ++qi) {
            intended[qi][t] = target_sets[t][qi];
        }
        report.clusters.post.push_back(cluster_stats(
            teachers.embedders, manipulated_sets[t], intended));
    }
    return report;
}

nlohmann::json eval_report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["gallery_rows"] = report.gallery_rows;
    j["query_rows"] = report.query_rows;
    j["ks"] = report.ks;

    nlohmann::json r;
    for (std::size_t ki = 0; ki < report.ks.size(); ++ki) {
        r[std::to_string(report.ks[ki])] = report.r_at_k[ki];
    }
    j["r_at_k"] = r;
    j["r_evaluated"] = report.r_evaluated;
    j["r_excluded"] = report.r_excluded;

    nlohmann::json t;
    for (std::size_t a = 0; a < report.attrs.size(); ++a) {
        nlohmann::json row;
        for (std::size_t ki = 0; ki < report.ks.size(); ++ki) {
            row[std::to_string(report.ks[ki])] = report.t_at_k[a][ki];
        }
        t[report.attrs[a]] = row;
    }
    nlohmann::json all;
    for (std::size_t ki = 0; ki < report.ks.size(); ++ki) {
        all[std::to_string(report.ks[ki])] = report.t_all[ki];
    }
    t["All"] = all;
    j["t_at_k"] = t;

    nlohmann::json unreachable;
    for (std::size_t a = 0; a < report.attrs.size(); ++a) {
        unreachable[report.attrs[a]] = report.t_unreachable[a];
    }
    j["t_unreachable"] = unreachable;
    j["unreachable_count"] = report.unreachable_count;

    nlohmann::json probe;
    probe["attrs"] = report.probe.attrs;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t2 = 0; t2 < report.probe.attrs.size(); ++t2) {
        nlohmann::json cells = nlohmann::json::array();
        for (std::size_t m = 0; m < report.probe.attrs.size(); ++m) {
            cells.push_back(
                {{"attr", report.probe.attrs[m]},
                 {"original", report.probe.cells[t2][m].original},
                 {"manipulated", report.probe.cells[t2][m].manipulated}});
        }
        rows.push_back({{"task", report.probe.attrs[t2]}, {"cells", cells}});
    }
    probe["rows"] = rows;
    probe["avg_delta"] = report.probe.avg_delta;
    j["probe_delta"] = probe;

    const auto stat_json = [](const ClusterStat& s) {
        return nlohmann::json{{"attr", s.attr_type},
                              {"intra", s.intra},
                              {"inter", s.inter},
                              {"intra_pairs", s.intra_pairs},
                              {"inter_pairs", s.inter_pairs}};
    };
    nlohmann::json clusters;
    nlohmann::json pre = nlohmann::json::array();
    for (const ClusterStat& s : report.clusters.pre) pre.push_back(stat_json(s));
    clusters["pre"] = pre;
    nlohmann::json post;
    for (std::size_t t2 = 0; t2 < report.clusters.post.size(); ++t2) {
        nlohmann::json row = nlohmann::json::array();
        for (const ClusterStat& s : report.clusters.post[t2]) {
            row.push_back(stat_json(s));
        }
        post[report.attrs[t2]] = row;
    }
    clusters["post"] = post;
    j["cluster_stats"] = clusters;
    return j;
}

std::string eval_report_to_text(const EvalReport& report) {
    std::ostringstream out;
    char line[256];

    out << "retrieval evaluation\n";
    std::snprintf(line, sizeof(line),
                  "gallery rows %zu, queries %zu (%zu excluded from recall)\n",
                  report.gallery_rows, report.query_rows, report.r_excluded);
    out << line << "\n";

    out << "instance recall\n";
    out << "      k";
    for (std::size_t k : report.ks) {
        std::snprintf(line, sizeof(line), " %8zu", k);
        out << line;
    }
    out << "\n    R@k";
    for (double v : report.r_at_k) {
        std::snprintf(line, sizeof(line), " %8.4f", v);
        out << line;
    }
    out << "\n\n";

    out << "attribute manipulation accuracy\n";
    out << "            k";
    for (std::size_t k : report.ks) {
        std::snprintf(line, sizeof(line), " %8zu", k);
        out << line;
    }
    out << "\n";
    for (std::size_t a = 0; a < report.attrs.size(); ++a) {
        std::snprintf(line, sizeof(line), " %12s", report.attrs[a].c_str());
        out << line;
        for (double v : report.t_at_k[a]) {
            std::snprintf(line, sizeof(line), " %8.4f", v);
            out << line;
        }
        out << "\n";
    }
    out << "          All";
    for (double v : report.t_all) {
        std::snprintf(line, sizeof(line), " %8.4f", v);
        out << line;
    }
    std::snprintf(line, sizeof(line),
                  "\nunreachable target triples: %zu of %zu\n\n",
                  report.unreachable_count,
                  report.query_rows * report.attrs.size());
    out << line;

    out << "probe accuracy on intended labels (original -> manipulated)\n";
    for (std::size_t t = 0; t < report.probe.attrs.size(); ++t) {
        double rem_orig = 0.0, rem_moved = 0.0;
        std::size_t rem = 0;
        for (std::size_t m = 0; m < report.probe.attrs.size(); ++m) {
            if (m == t) continue;
            rem_orig += report.probe.cells[t][m].original;
            rem_moved += report.probe.cells[t][m].manipulated;
            rem += 1;
        }
        if (rem > 0) {
            rem_orig /= static_cast<double>(rem);
            rem_moved /= static_cast<double>(rem);
        }
        std::snprintf(line, sizeof(line),
                      " %12s  target %.4f -> %.4f   remaining %.4f -> %.4f\n",
                      report.probe.attrs[t].c_str(),
                      report.probe.cells[t][t].original,
                      report.probe.cells[t][t].manipulated, rem_orig,
                      rem_moved);
        out << line;
    }
    std::snprintf(line, sizeof(line), " avg target delta %+.4f\n\n",
                  report.probe.avg_delta);
    out << line;

    out << "embedding cluster cosine (intra / inter)\n";
    for (std::size_t a = 0; a < report.clusters.pre.size(); ++a) {
        const ClusterStat& pre = report.clusters.pre[a];
        std::snprintf(line, sizeof(line), " %12s  pre %.4f / %.4f",
                      pre.attr_type.c_str(), pre.intra, pre.inter);
        out << line;
        if (a < report.clusters.post.size() &&
            a < report.clusters.post[a].size()) {
            const ClusterStat& post = report.clusters.post[a][a];
            std::snprintf(line, sizeof(line), "   post %.4f / %.4f",
                          post.intra, post.inter);
            out << line;
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace flam
