#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "flam/embedder.hpp"
#include "flam/manipulator.hpp"
#include "flam/nn.hpp"
#include "flam/synthdata.hpp"
#include "flam/tensor.hpp"

namespace flam {

// Gallery features as unit-norm rows with identity and labels aligned to
// the rows. Immutable once built; searches are read-only.
struct RetrievalIndex {
    AttributeSchema schema;
    ag::Tensor gallery;  // rows x D
    std::vector<std::uint64_t> instance_ids;
    std::vector<std::vector<std::int32_t>> labels;  // per row, schema order
};

// Rows already within 1e-6 of unit norm keep their stored values bit for
// bit; anything else is rescaled. Zero-norm features are a data error
// naming the record.
RetrievalIndex build_index(const Dataset& gallery);

// Digest of the index's canonical byte layout. Equal digests mean equal
// search behavior.
std::string index_digest(const RetrievalIndex& index);

struct SearchHit {
    std::size_t row = 0;
    std::uint64_t instance_id = 0;
    double similarity = 0.0;
};

struct SearchResult {
    std::vector<SearchHit> hits;  // cosine descending, ties to the lower row
    bool truncated = false;       // k exceeded the gallery, all rows returned
};

// Exact top-k by cosine. Rankings are invariant to positive rescaling of
// the query.
SearchResult search(const RetrievalIndex& index, const ag::Tensor& q,
                    std::size_t k);

// G(x, d) with d the dictionary row of target_class for attr_type.
// x is a single feature (1-D or one row); the result is one unit-norm row.
ag::Tensor manipulate_query(const Generator& g,
                            const std::vector<Dictionary>& dictionaries,
                            const ag::Tensor& x, std::string_view attr_type,
                            std::size_t target_class);

struct RecallResult {
    double recall = 0.0;
    std::size_t hits = 0;
    std::size_t evaluated = 0;
    std::size_t excluded = 0;  // query instances absent from the gallery
};

// Fraction of queries whose instance appears in the top k.
RecallResult recall_at_k(const RetrievalIndex& index, const Dataset& queries,
                         std::size_t k);

struct TopKResult {
    double accuracy = 0.0;
    std::size_t hits = 0;
    std::size_t evaluated = 0;
    std::size_t unreachable = 0;  // demanded triple absent from the gallery
};

// One manipulation task: for every query draw a target class, manipulate,
// search, and count a hit when some top-k row's labels equal the query's
// labels with attr_type replaced by the target. Targets are drawn uniformly
// from the classes present in the gallery minus the query's own class,
// from Rng(seed).child(attr_type), one draw per query in order. Queries
// whose demanded triple exists nowhere in the gallery still count as
// evaluated misses and are tallied in `unreachable`.
TopKResult top_k_accuracy(const RetrievalIndex& index, const Dataset& queries,
                          const Generator& g,
                          const std::vector<Dictionary>& dictionaries,
                          std::string_view attr_type, std::size_t k,
                          std::uint64_t seed);

// One affine head per attribute type, D -> class-count logits.
struct LinearProbe {
    AttributeSchema schema;
    std::vector<nn::Affine> heads;
};

struct ProbeConfig {
    double lr = 1e-2;
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
};

ProbeConfig probe_config_from_json(const nlohmann::json& j);
nlohmann::json probe_config_to_json(const ProbeConfig& c);

// Cross-entropy on the labeled records of each attribute independently.
LinearProbe train_probe(const Dataset& train, const ProbeConfig& config = {});

// Argmax class per row; ties go to the lowest class index.
std::vector<std::int32_t> probe_predict(const LinearProbe& probe,
                                        std::size_t attr_index,
                                        const ag::Tensor& rows);

struct ProbeCell {
    double original = 0.0;
    double manipulated = 0.0;
};

// One row per manipulation task (schema order). cells[t][m] holds the
// probe's accuracy at predicting attribute m's intended label (the drawn
// target class when m == t, the query's own label otherwise) on original
// versus manipulated features. Targets are drawn exactly as in
// top_k_accuracy, so reports from one seed are internally consistent.
struct ProbeDeltaReport {
    std::vector<std::string> attrs;
    std::vector<std::vector<ProbeCell>> cells;
    double avg_delta = 0.0;  // mean over tasks of the target-cell difference
};

ProbeDeltaReport probe_delta(const LinearProbe& probe, const Dataset& queries,
                             const Generator& g,
                             const std::vector<Dictionary>& dictionaries,
                             std::uint64_t seed);

struct ClusterStat {
    std::string attr_type;
    double intra = 0.0;  // mean cosine within classes of >= 2 members
    double inter = 0.0;  // mean cosine across classes
    std::size_t intra_pairs = 0;
    std::size_t inter_pairs = 0;
};

// Per attribute: mean pairwise cosine of the attribute embeddings within
// and across classes. Rows with an absent label for an attribute are left
// out of that attribute's statistics.
std::vector<ClusterStat> cluster_stats(
    const std::vector<Embedder>& embedders, const ag::Tensor& features,
    const std::vector<std::vector<std::int32_t>>& labels);

struct ClusterReport {
    // original query features under their true labels
    std::vector<ClusterStat> pre;
    // post[t][m]: attribute m's stats on task-t manipulated features under
    // intended labels (target class for m == t, original otherwise)
    std::vector<std::vector<ClusterStat>> post;
};

struct EvalConfig {
    std::vector<std::size_t> ks = {1, 5, 10, 20, 50};
    std::uint64_t seed = 0;
    ProbeConfig probe;
};

EvalConfig eval_config_from_json(const nlohmann::json& j);
nlohmann::json eval_config_to_json(const EvalConfig& c);

struct EvalReport {
    std::size_t gallery_rows = 0;
    std::size_t query_rows = 0;
    std::vector<std::size_t> ks;
    std::vector<double> r_at_k;  // aligned with ks
    std::size_t r_evaluated = 0;
    std::size_t r_excluded = 0;
    std::vector<std::string> attrs;            // manipulation tasks
    std::vector<std::vector<double>> t_at_k;   // [attr][ks]
    std::vector<double> t_all;                 // [ks], tasks pooled
    std::vector<std::size_t> t_unreachable;    // [attr]
    std::size_t unreachable_count = 0;         // summed over tasks
    ProbeDeltaReport probe;
    ClusterReport clusters;
};

// Full evaluation pass: recall table, the three manipulation tasks, probe
// deltas, and cluster statistics, all driven by config.seed.
EvalReport run_evaluation(const Dataset& train, const Dataset& queries,
                          const Dataset& gallery, const Teachers& teachers,
                          const Generator& g, const EvalConfig& config = {});

nlohmann::json eval_report_to_json(const EvalReport& report);
std::string eval_report_to_text(const EvalReport& report);

}  // namespace flam
