#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "flam/embedder.hpp"
#include "flam/manipulator.hpp"
#include "flam/retrieval.hpp"
#include "flam/synthdata.hpp"

namespace flam {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Artifact names inside the run directory.
struct RunPaths {
    std::string train = "train.flamfeat";
    std::string query = "query.flamfeat";
    std::string gallery = "gallery.flamfeat";
    std::string embedder_prefix = "embedder_";  // + <type> + ".flamemb"
    std::string manipulator = "manipulator.flamgan";
    std::string report_json = "report.json";
    std::string report_text = "report.txt";
    std::string manifest = "manifest.json";
};

// One JSON file drives every stage. Stage blocks that do not pin their own
// seed inherit the master seed; stage-internal random streams are already
// namespaced, so sharing it is safe.
struct RunConfig {
    std::uint64_t seed = 0;
    AttributeSchema schema = AttributeSchema::defaults();
    GenConfig data;
    std::uint64_t data_seed = 0;
    std::uint64_t split_seed = 0;
    SplitFractions fractions{2.0 / 3.0, 1.0 / 15.0, 4.0 / 15.0};
    std::vector<EmbedderConfig> embedders;  // schema type order
    ManipConfig manipulator;
    EvalConfig eval;
    RunPaths paths;
};

// Top-level keys are checked against the known set so that a typo in a
// config file or a --set override fails loudly instead of being ignored.
// "embedder" holds the shared base config, "embedders" per-type overrides.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

// "a.b.c=value" writes into nested objects, creating them as needed. The
// value is parsed as JSON when it parses, otherwise taken as a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

// Ablation flag rendering, e.g. "M/OS/Adv"; "-" marks a disabled leg.
std::string variant_name(const ManipConfig& c);

// Stage drivers shared by the command-line tool and the tests. Each writes
// its artifacts under out_dir, refreshes manifest.json with content hashes
// and timing, and returns the artifact paths. `log` gets progress lines
// when non-null. Identical config and inputs reproduce identical artifact
// bytes; the manifest differs only in wall-clock timing.
std::vector<std::filesystem::path> cmd_gen_data(
    const RunConfig& config, const std::filesystem::path& out_dir,
    std::ostream* log = nullptr);
std::vector<std::filesystem::path> cmd_train_embedders(
    const RunConfig& config, const std::filesystem::path& out_dir,
    std::ostream* log = nullptr);
std::vector<std::filesystem::path> cmd_train_manipulator(
    const RunConfig& config, const std::filesystem::path& out_dir,
    std::ostream* log = nullptr);
std::vector<std::filesystem::path> cmd_evaluate(
    const RunConfig& config, const std::filesystem::path& out_dir,
    std::ostream* log = nullptr);

struct ManipulateArgs {
    std::filesystem::path manipulator;
    std::vector<std::filesystem::path> embedders;  // FLAMEMB files, any order
    std::filesystem::path gallery;
    std::filesystem::path queries;
    std::size_t query_index = 0;
    std::string attr_type;
    std::size_t target_class = 0;
    std::size_t k = 10;
};

// Lines "rank,id,similarity", best first, ranks starting at one.
std::string cmd_manipulate(const ManipulateArgs& args);

// One comparative table over saved evaluation reports, one row per file,
// labeled by file stem.
std::string cmd_report(const std::vector<std::filesystem::path>& reports);

}  // namespace flam
