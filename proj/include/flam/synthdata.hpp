#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace flam {

inline constexpr std::int32_t kAbsent = -1;

struct AttributeSchema {
    std::vector<std::string> types;
    std::vector<std::size_t> class_counts;

    // shape/color/pattern, 10 classes each
    static AttributeSchema defaults();

    std::size_t n_types() const { return types.size(); }
    std::size_t total_classes() const;
    std::size_t index_of(std::string_view type) const;  // ConfigError if absent
    void validate() const;
};

enum class Mixing { none, random_rotation };

std::string to_string(Mixing m);
Mixing mixing_from_string(std::string_view s);

struct GenConfig {
    std::size_t dim = 1024;
    std::size_t instances = 3750;
    std::size_t views = 2;
    std::vector<double> signal_strengths;  // per type; empty means 1.0 each
    // At 0.2 the per-record nearest-prototype ceiling stays ~0.998 for 10
    // orthonormal classes; 0.4 would cap it near 0.81.
    double style_strength = 0.2;
    double noise_sigma = 0.05;
    Mixing mixing = Mixing::none;
    double label_density = 1.0;
    double class_correlation = 0.0;
    // (first, second): with probability class_correlation the first type's
    // class is forced to second's class mod first's class count
    std::vector<std::pair<std::string, std::string>> correlated_pairs;
};

struct FeatureRecord {
    std::uint64_t instance_id = 0;
    std::vector<std::int32_t> labels;  // per schema type; kAbsent when unlabeled
    std::vector<float> feature;
};

struct Dataset {
    AttributeSchema schema;
    GenConfig config;
    std::uint64_t seed = 0;
    std::vector<FeatureRecord> records;
};

// Pure function of (config, schema, seed). Raw view features are
// sum_a s_a * prototype[a][class_a] + style + noise, optionally rotated,
// then unit-normalized. Label keep/drop applies per instance so all views
// of an instance agree.
Dataset generate(const GenConfig& config, const AttributeSchema& schema,
                 std::uint64_t seed);

struct SplitFractions {
    double train = 1.0;
    double query = 0.0;
    double gallery = 0.0;
};

struct Splits {
    Dataset train;
    Dataset query;
    Dataset gallery;
};

// Instance-level split. Train instances are disjoint from the rest; each
// query record's instance keeps at least one record in the gallery.
Splits split(const Dataset& dataset, SplitFractions fractions,
             std::uint64_t seed);

void save_features(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_features(const std::filesystem::path& path);

nlohmann::json schema_to_json(const AttributeSchema& schema);
AttributeSchema schema_from_json(const nlohmann::json& j);
nlohmann::json gen_config_to_json(const GenConfig& config);
GenConfig gen_config_from_json(const nlohmann::json& j);

}  // namespace flam
