#include "flam/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>
#include <utility>

#include "flam/error.hpp"
#include "flam/io_util.hpp"

namespace flam {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kTopLevelKeys = {
    "seed",     "schema",      "data",  "embedder",
    "embedders", "manipulator", "eval",  "paths"};
const std::set<std::string> kPathKeys = {
    "train",       "query",       "gallery",     "embedder_prefix",
    "manipulator", "report_json", "report_text", "manifest"};

SplitFractions fractions_from_json(const nlohmann::json& j,
                                   SplitFractions defaults) {
    SplitFractions f = defaults;
    f.train = j.value("train", f.train);
    f.query = j.value("query", f.query);
    f.gallery = j.value("gallery", f.gallery);
    return f;
}

nlohmann::json fractions_to_json(const SplitFractions& f) {
    return {{"train", f.train}, {"query", f.query}, {"gallery", f.gallery}};
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

std::string file_text(const fs::path& path) {
    const std::vector<char> buf = io::read_file(path);
    return {buf.begin(), buf.end()};
}

nlohmann::json parse_json_file(const fs::path& path) {
    try {
        return nlohmann::json::parse(file_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(path.string() + " is not valid JSON: " + e.what());
    }
}

class StageTimer {
  public:
    StageTimer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

// manifest.json accumulates one entry per stage; a rerun replaces its own
// entry and leaves the others alone
void record_stage(const RunConfig& config, const fs::path& out_dir,
                  const std::string& stage,
                  const std::vector<fs::path>& artifacts, double seconds,
                  nlohmann::json extra = nlohmann::json::object()) {
    const fs::path manifest_path = out_dir / config.paths.manifest;
    nlohmann::json manifest;
    if (fs::exists(manifest_path)) {
        try {
            manifest = parse_json_file(manifest_path);
        } catch (const DataError&) {
            manifest = nlohmann::json::object();
        }
    }
    manifest["tool_version"] = std::string(kToolVersion);
    nlohmann::json entry = {{"config", run_config_to_json(config)},
                            {"wall_clock_seconds", seconds}};
    nlohmann::json hashes = nlohmann::json::object();
    for (const fs::path& p : artifacts) {
        hashes[p.filename().string()] = io::sha256_file(p);
    }
    entry["artifacts"] = hashes;
    entry.update(extra);
    manifest["stages"][stage] = entry;
    io::write_file(manifest_path, json_text(manifest));
}

void require_schema_match(const Dataset& data, const AttributeSchema& schema,
                          const fs::path& origin) {
    if (data.schema.types != schema.types ||
        data.schema.class_counts != schema.class_counts) {
        throw ConfigError(origin.string() +
                          " was generated with a different schema");
    }
}

fs::path embedder_path(const RunConfig& config, const fs::path& out_dir,
                       const std::string& type) {
    return out_dir / (config.paths.embedder_prefix + type + ".flamemb");
}

std::vector<EmbedderConfig> resolved_embedder_configs(const RunConfig& config) {
    if (config.embedders.empty()) {
        EmbedderConfig base;
        base.seed = config.seed;
        return std::vector<EmbedderConfig>(config.schema.n_types(), base);
    }
    if (config.embedders.size() != config.schema.n_types()) {
        throw ConfigError("run config: " +
                          std::to_string(config.embedders.size()) +
                          " embedder configs for " +
                          std::to_string(config.schema.n_types()) +
                          " attribute types");
    }
    return config.embedders;
}

ManipConfig resolved_manip_config(const RunConfig& config) {
    ManipConfig m = config.manipulator;
    if (m.target_attr.empty() && !config.schema.types.empty()) {
        m.target_attr = config.schema.types.front();
    }
    return m;
}

Teachers load_teachers(const RunConfig& config, const fs::path& out_dir) {
    Teachers teachers;
    for (const std::string& type : config.schema.types) {
        LoadedEmbedder loaded = load_embedder(embedder_path(config, out_dir, type));
        teachers.embedders.push_back(std::move(loaded.embedder));
        teachers.dictionaries.push_back(std::move(loaded.dictionary));
    }
    return teachers;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
    try {
        for (const auto& item : j.items()) {
            if (!kTopLevelKeys.count(item.key())) {
                throw ConfigError("run config: unknown key '" + item.key() +
                                  "'");
            }
        }
        RunConfig c;
        c.seed = j.value("seed", c.seed);
        if (j.contains("schema")) c.schema = schema_from_json(j.at("schema"));

        const nlohmann::json data = j.value("data", nlohmann::json::object());
        nlohmann::json merged = gen_config_to_json(GenConfig{});
        merged.update(data);
        c.data = gen_config_from_json(merged);
        c.data_seed = data.value("seed", c.seed);
        c.split_seed = data.value("split_seed", c.seed);
        c.fractions = fractions_from_json(
            data.value("fractions", nlohmann::json::object()), c.fractions);

        const nlohmann::json base =
            j.value("embedder", nlohmann::json::object());
        const nlohmann::json overrides =
            j.value("embedders", nlohmann::json::object());
        for (const auto& item : overrides.items()) {
            if (std::find(c.schema.types.begin(), c.schema.types.end(),
                          item.key()) == c.schema.types.end()) {
                throw ConfigError(
                    "run config: embedder override for unknown type '" +
                    item.key() + "'");
            }
        }
        for (const std::string& type : c.schema.types) {
            nlohmann::json block = base;
            if (overrides.contains(type)) block.update(overrides.at(type));
            if (!block.contains("seed")) block["seed"] = c.seed;
            c.embedders.push_back(embedder_config_from_json(block));
        }

        nlohmann::json manip =
            j.value("manipulator", nlohmann::json::object());
        if (!manip.contains("seed")) manip["seed"] = c.seed;
        c.manipulator = manip_config_from_json(manip);
        if (c.manipulator.target_attr.empty() && !c.schema.types.empty()) {
            c.manipulator.target_attr = c.schema.types.front();
        }

        nlohmann::json eval = j.value("eval", nlohmann::json::object());
        if (!eval.contains("seed")) eval["seed"] = c.seed;
        c.eval = eval_config_from_json(eval);

        const nlohmann::json paths =
            j.value("paths", nlohmann::json::object());
        for (const auto& item : paths.items()) {
            if (!kPathKeys.count(item.key())) {
                throw ConfigError("run config: unknown path key '" +
                                  item.key() + "'");
            }
        }
        c.paths.train = paths.value("train", c.paths.train);
        c.paths.query = paths.value("query", c.paths.query);
        c.paths.gallery = paths.value("gallery", c.paths.gallery);
        c.paths.embedder_prefix =
            paths.value("embedder_prefix", c.paths.embedder_prefix);
        c.paths.manipulator = paths.value("manipulator", c.paths.manipulator);
        c.paths.report_json = paths.value("report_json", c.paths.report_json);
        c.paths.report_text = paths.value("report_text", c.paths.report_text);
        c.paths.manifest = paths.value("manifest", c.paths.manifest);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
}

nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json data = gen_config_to_json(c.data);
    data["seed"] = c.data_seed;
    data["split_seed"] = c.split_seed;
    data["fractions"] = fractions_to_json(c.fractions);

    nlohmann::json embedders = nlohmann::json::object();
    for (std::size_t a = 0; a < c.embedders.size(); ++a) {
        embedders[c.schema.types[a]] = embedder_config_to_json(c.embedders[a]);
    }

    return {{"seed", c.seed},
            {"schema", schema_to_json(c.schema)},
            {"data", data},
            {"embedders", embedders},
            {"manipulator", manip_config_to_json(c.manipulator)},
            {"eval", eval_config_to_json(c.eval)},
            {"paths",
             {{"train", c.paths.train},
              {"query", c.paths.query},
              {"gallery", c.paths.gallery},
              {"embedder_prefix", c.paths.embedder_prefix},
              {"manipulator", c.paths.manipulator},
              {"report_json", c.paths.report_json},
              {"report_text", c.paths.report_text},
              {"manifest", c.paths.manifest}}}};
}

RunConfig load_run_config(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(file_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

void apply_override(nlohmann::json& j, std::string_view assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override must look like key.path=value, got '" +
                          std::string(assignment) + "'");
    }
    const std::string keypath(assignment.substr(0, eq));
    const std::string value(assignment.substr(eq + 1));
    try {
        nlohmann::json* cur = &j;
        std::size_t pos = 0;
        while (true) {
            const std::size_t dot = keypath.find('.', pos);
            const std::string key =
                keypath.substr(pos, dot == std::string::npos ? std::string::npos
                                                             : dot - pos);
            if (key.empty()) {
                throw ConfigError("override has an empty key segment: '" +
                                  keypath + "'");
            }
            if (dot == std::string::npos) {
                nlohmann::json parsed =
                    nlohmann::json::parse(value, nullptr, false);
                (*cur)[key] =
                    parsed.is_discarded() ? nlohmann::json(value) : parsed;
                return;
            }
            cur = &(*cur)[key];
            pos = dot + 1;
        }
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("override '" + std::string(assignment) +
                          "' crosses a non-object value");
    }
}

std::string variant_name(const ManipConfig& c) {
    std::string name = c.matching == Matching::M ? "M" : "S";
    name += c.sampling == Sampling::os ? "/OS" : "/-";
    name += c.lambda_adv > 0.0 ? "/Adv" : "/-";
    return name;
}

std::vector<fs::path> cmd_gen_data(const RunConfig& config,
                                   const fs::path& out_dir,
                                   std::ostream* log) {
    StageTimer timer;
    const Dataset full = generate(config.data, config.schema, config.data_seed);
    const Splits splits = split(full, config.fractions, config.split_seed);
    fs::create_directories(out_dir);
    const std::vector<std::pair<std::string, const Dataset*>> outputs = {
        {config.paths.train, &splits.train},
        {config.paths.query, &splits.query},
        {config.paths.gallery, &splits.gallery}};
    std::vector<fs::path> artifacts;
    for (const auto& [name, dataset] : outputs) {
        const fs::path path = out_dir / name;
        save_features(*dataset, path);
        artifacts.push_back(path);
    }
    if (log) {
        *log << "gen-data: " << splits.train.records.size() << " train / "
             << splits.query.records.size() << " query / "
             << splits.gallery.records.size() << " gallery records\n";
    }
    record_stage(config, out_dir, "gen-data", artifacts, timer.seconds());
    return artifacts;
}

std::vector<fs::path> cmd_train_embedders(const RunConfig& config,
                                          const fs::path& out_dir,
                                          std::ostream* log) {
    StageTimer timer;
    const Dataset train = load_features(out_dir / config.paths.train);
    require_schema_match(train, config.schema, out_dir / config.paths.train);
    const std::vector<EmbedderConfig> configs =
        resolved_embedder_configs(config);
    fs::create_directories(out_dir);
    std::vector<fs::path> artifacts;
    for (std::size_t a = 0; a < config.schema.n_types(); ++a) {
        const std::string& type = config.schema.types[a];
        const EmbedderTrainResult result =
            train_embedder(train, type, configs[a]);
        const fs::path path = embedder_path(config, out_dir, type);
        const nlohmann::json sidecar = {
            {"attr_type", type},
            {"config", embedder_config_to_json(configs[a])},
            {"epoch_loss", result.epoch_loss}};
        save_embedder(path, result.embedder, result.dictionary, sidecar);
        artifacts.push_back(path);
        artifacts.push_back(path.string() + ".log.json");
        if (log) {
            *log << "train-embedders: " << type << " loss "
                 << result.epoch_loss.front() << " -> "
                 << result.epoch_loss.back() << "\n";
        }
    }
    record_stage(config, out_dir, "train-embedders", artifacts,
                 timer.seconds());
    return artifacts;
}

std::vector<fs::path> cmd_train_manipulator(const RunConfig& config,
                                            const fs::path& out_dir,
                                            std::ostream* log) {
    StageTimer timer;
    const Dataset train = load_features(out_dir / config.paths.train);
    require_schema_match(train, config.schema, out_dir / config.paths.train);
    const Teachers teachers = load_teachers(config, out_dir);
    const ManipConfig manip = resolved_manip_config(config);
    const ManipTrainResult result = train_manipulator(train, teachers, manip);
    if (log) {
        for (std::size_t e = 0; e < result.epochs.size(); ++e) {
            const EpochLog& l = result.epochs[e];
            *log << "train-manipulator: epoch " << e << " d_adv " << l.d_adv
                 << " g_adv " << l.g_adv << " match " << l.match << " cycle "
                 << l.cycle << " proxy " << l.proxy << "\n";
        }
    }
    nlohmann::json epochs = nlohmann::json::array();
    for (const EpochLog& l : result.epochs) {
        epochs.push_back({{"d_adv", l.d_adv},
                          {"g_adv", l.g_adv},
                          {"match", l.match},
                          {"cycle", l.cycle},
                          {"proxy", l.proxy}});
    }
    fs::create_directories(out_dir);
    const fs::path path = out_dir / config.paths.manipulator;
    const nlohmann::json sidecar = {{"config", manip_config_to_json(manip)},
                                    {"variant", variant_name(manip)},
                                    {"epochs", epochs}};
    save_manipulator(path, result.generator, result.discriminator, sidecar);
    const std::vector<fs::path> artifacts = {path,
                                             path.string() + ".log.json"};
    record_stage(config, out_dir, "train-manipulator", artifacts,
                 timer.seconds(), {{"variant", variant_name(manip)}});
    return artifacts;
}

std::vector<fs::path> cmd_evaluate(const RunConfig& config,
                                   const fs::path& out_dir,
                                   std::ostream* log) {
    StageTimer timer;
    const Dataset train = load_features(out_dir / config.paths.train);
    const Dataset query = load_features(out_dir / config.paths.query);
    const Dataset gallery = load_features(out_dir / config.paths.gallery);
    require_schema_match(train, config.schema, out_dir / config.paths.train);
    require_schema_match(query, config.schema, out_dir / config.paths.query);
    require_schema_match(gallery, config.schema,
                         out_dir / config.paths.gallery);
    const Teachers teachers = load_teachers(config, out_dir);
    const LoadedManipulator manip =
        load_manipulator(out_dir / config.paths.manipulator);
    const EvalReport report = run_evaluation(train, query, gallery, teachers,
                                             manip.generator, config.eval);
    const std::string text = eval_report_to_text(report);
    if (log) *log << text;
    const fs::path json_path = out_dir / config.paths.report_json;
    const fs::path text_path = out_dir / config.paths.report_text;
    io::write_file(json_path, json_text(eval_report_to_json(report)));
    io::write_file(text_path, text);
    const std::vector<fs::path> artifacts = {json_path, text_path};
    record_stage(config, out_dir, "evaluate", artifacts, timer.seconds());
    return artifacts;
}

std::string cmd_manipulate(const ManipulateArgs& args) {
    if (args.k == 0) throw ConfigError("manipulate: k must be positive");
    const LoadedManipulator manip = load_manipulator(args.manipulator);
    std::vector<Dictionary> dictionaries;
    for (const fs::path& path : args.embedders) {
        dictionaries.push_back(load_embedder(path).dictionary);
    }
    const Dataset gallery = load_features(args.gallery);
    const Dataset queries = load_features(args.queries);
    if (args.query_index >= queries.records.size()) {
        throw ConfigError("manipulate: query index " +
                          std::to_string(args.query_index) + " out of range (" +
                          std::to_string(queries.records.size()) +
                          " records)");
    }
    const Dictionary* dict = nullptr;
    for (const Dictionary& d : dictionaries) {
        if (d.attr_type == args.attr_type) dict = &d;
    }
    if (dict == nullptr) {
        throw ConfigError("manipulate: no embedder checkpoint for '" +
                          args.attr_type + "'");
    }
    if (args.target_class >= dict->vectors.rows()) {
        throw ConfigError("manipulate: class " +
                          std::to_string(args.target_class) +
                          " out of range for '" + args.attr_type + "' (" +
                          std::to_string(dict->vectors.rows()) + " classes)");
    }
    const RetrievalIndex index = build_index(gallery);
    const FeatureRecord& rec = queries.records[args.query_index];
    const ag::Tensor x = ag::Tensor::vector(
        std::vector<double>(rec.feature.begin(), rec.feature.end()));
    const ag::Tensor moved = manipulate_query(
        manip.generator, dictionaries, x, args.attr_type, args.target_class);
    const SearchResult result = search(index, moved, args.k);
    std::string out;
    char line[64];
    for (std::size_t i = 0; i < result.hits.size(); ++i) {
        std::snprintf(line, sizeof line, "%zu,%llu,%.6f\n", i + 1,
                      static_cast<unsigned long long>(
                          result.hits[i].instance_id),
                      result.hits[i].similarity);
        out += line;
    }
    return out;
}

std::string cmd_report(const std::vector<fs::path>& reports) {
    if (reports.empty()) throw ConfigError("report: no report files given");
    std::vector<nlohmann::json> parsed;
    for (const fs::path& path : reports) {
        parsed.push_back(parse_json_file(path));
    }

    std::vector<std::string> attrs;
    std::string k_label;
    try {
        attrs = parsed.front()
                    .at("probe_delta")
                    .at("attrs")
                    .get<std::vector<std::string>>();
        std::size_t k_max = 0;
        for (const auto& item : parsed.front().at("t_at_k").at("All").items()) {
            k_max = std::max(k_max, static_cast<std::size_t>(
                                        std::stoul(item.key())));
        }
        k_label = std::to_string(k_max);
    } catch (const std::exception& e) {
        throw DataError(reports.front().string() +
                        " is not an evaluation report: " + e.what());
    }

    std::size_t label_width = 8;
    for (const fs::path& path : reports) {
        label_width = std::max(label_width, path.stem().string().size());
    }

    std::size_t col_width = 10;
    for (const std::string& attr : attrs) {
        col_width = std::max(col_width, k_label.size() + attr.size() + 5);
    }

    const auto cell = [&](const nlohmann::json& rep, const char* section,
                          const std::string& key1, const std::string& key2) {
        char buf[32];
        try {
            const double v = key2.empty()
                                 ? rep.at(section).at(key1).get<double>()
                                 : rep.at(section).at(key1).at(key2)
                                       .get<double>();
            std::snprintf(buf, sizeof buf, "%-*.4f",
                          static_cast<int>(col_width), v);
        } catch (const nlohmann::json::exception&) {
            std::snprintf(buf, sizeof buf, "%-*s",
                          static_cast<int>(col_width), "-");
        }
        return std::string(buf);
    };

    std::string out;
    char head[64];
    std::snprintf(head, sizeof head, "%-*s  ", static_cast<int>(label_width),
                  "run");
    out += head;
    for (const std::string& attr : attrs) {
        std::snprintf(head, sizeof head, "%-*s", static_cast<int>(col_width),
                      ("T@" + k_label + "/" + attr).c_str());
        out += head;
    }
    std::snprintf(head, sizeof head, "%-*s%-*s", static_cast<int>(col_width),
                  ("T@" + k_label + "/All").c_str(),
                  static_cast<int>(col_width), "R@1");
    out += head;
    out += "\n";

    for (std::size_t i = 0; i < reports.size(); ++i) {
        std::snprintf(head, sizeof head, "%-*s  ",
                      static_cast<int>(label_width),
                      reports[i].stem().string().c_str());
        out += head;
        for (const std::string& attr : attrs) {
            out += cell(parsed[i], "t_at_k", attr, k_label);
        }
        out += cell(parsed[i], "t_at_k", "All", k_label);
        out += cell(parsed[i], "r_at_k", "1", "");
        out += "\n";
    }
    return out;
}

}  // namespace flam
