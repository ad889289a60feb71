#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flam/error.hpp"
#include "flam/io_util.hpp"
#include "flam/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required) {
    auto* config =
        cmd->add_option("--config", opts.config_path, "Run configuration JSON");
    if (config_required) config->required();
    cmd->add_option("--out", opts.out_dir, "Run directory for artifacts");
    cmd->add_option("--set", opts.overrides,
                    "Override a config value, key.path=value (repeatable)");
    cmd->add_option("--seed", opts.seed, "Master seed override")
        ->each([&opts](const std::string&) { opts.seed_given = true; });
}

flam::RunConfig resolve_config(const CommonOpts& opts) {
    std::vector<char> buf;
    try {
        buf = flam::io::read_file(opts.config_path);
    } catch (const flam::DataError& e) {
        throw flam::ConfigError(e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(std::string(buf.begin(), buf.end()));
    } catch (const nlohmann::json::parse_error& e) {
        throw flam::ConfigError(opts.config_path +
                                " is not valid JSON: " + e.what());
    }
    for (const std::string& assignment : opts.overrides) {
        flam::apply_override(j, assignment);
    }
    if (opts.seed_given) j["seed"] = opts.seed;
    return flam::run_config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"feature-level attribute manipulation pipeline"};
    app.set_version_flag("--version", std::string(flam::kToolVersion));
    app.require_subcommand(1);

    std::function<void()> action;

    CommonOpts gen_opts;
    auto* gen = app.add_subcommand(
        "gen-data", "Generate synthetic features and write the three splits");
    add_common(gen, gen_opts, true);
    gen->callback([&] {
        action = [&] {
            flam::cmd_gen_data(resolve_config(gen_opts), gen_opts.out_dir,
                               &std::cout);
        };
    });

    CommonOpts emb_opts;
    auto* emb = app.add_subcommand(
        "train-embedders",
        "Train one embedder per attribute type on the train split");
    add_common(emb, emb_opts, true);
    emb->callback([&] {
        action = [&] {
            flam::cmd_train_embedders(resolve_config(emb_opts),
                                      emb_opts.out_dir, &std::cout);
        };
    });

    CommonOpts manip_opts;
    auto* manip = app.add_subcommand(
        "train-manipulator",
        "Train the conditional generator against the frozen embedders");
    add_common(manip, manip_opts, true);
    manip->callback([&] {
        action = [&] {
            flam::cmd_train_manipulator(resolve_config(manip_opts),
                                        manip_opts.out_dir, &std::cout);
        };
    });

    CommonOpts eval_opts;
    auto* eval = app.add_subcommand(
        "evaluate", "Run retrieval and manipulation metrics, write reports");
    add_common(eval, eval_opts, true);
    eval->callback([&] {
        action = [&] {
            flam::cmd_evaluate(resolve_config(eval_opts), eval_opts.out_dir,
                               &std::cout);
        };
    });

    CommonOpts man_opts;
    flam::ManipulateArgs man_args;
    std::vector<std::string> man_embedders;
    std::string man_manipulator, man_gallery, man_queries;
    auto* man = app.add_subcommand(
        "manipulate",
        "Manipulate one query feature and print the top-k gallery matches");
    add_common(man, man_opts, false);
    man->add_option("--manipulator", man_manipulator, "FLAMGAN checkpoint");
    man->add_option("--embedder", man_embedders,
                    "FLAMEMB checkpoint (repeatable)");
    man->add_option("--gallery", man_gallery, "Gallery FLAMFEAT file");
    man->add_option("--queries", man_queries, "Query FLAMFEAT file");
    man->add_option("--index", man_args.query_index,
                    "Record index inside the query file");
    man->add_option("--attr", man_args.attr_type, "Attribute type to change")
        ->required();
    man->add_option("--class", man_args.target_class, "Target class index")
        ->required();
    man->add_option("--k", man_args.k, "Matches to print");
    man->callback([&] {
        action = [&] {
            if (!man_opts.config_path.empty()) {
                const flam::RunConfig config = resolve_config(man_opts);
                const std::filesystem::path out = man_opts.out_dir;
                man_args.manipulator = out / config.paths.manipulator;
                man_args.gallery = out / config.paths.gallery;
                man_args.queries = out / config.paths.query;
                man_args.embedders.clear();
                for (const std::string& type : config.schema.types) {
                    man_args.embedders.push_back(
                        out / (config.paths.embedder_prefix + type +
                               ".flamemb"));
                }
            }
            if (!man_manipulator.empty()) man_args.manipulator = man_manipulator;
            if (!man_gallery.empty()) man_args.gallery = man_gallery;
            if (!man_queries.empty()) man_args.queries = man_queries;
            if (!man_embedders.empty()) {
                man_args.embedders.assign(man_embedders.begin(),
                                          man_embedders.end());
            }
            if (man_args.manipulator.empty() || man_args.gallery.empty() ||
                man_args.queries.empty() || man_args.embedders.empty()) {
                throw flam::ConfigError(
                    "manipulate: pass --config or the explicit "
                    "--manipulator/--embedder/--gallery/--queries paths");
            }
            std::cout << flam::cmd_manipulate(man_args);
        };
    });

    std::vector<std::string> report_files;
    auto* rep = app.add_subcommand(
        "report", "Render one comparative table from evaluation reports");
    rep->add_option("reports", report_files, "report.json files")
        ->required()
        ->expected(-1);
    rep->callback([&] {
        action = [&] {
            std::vector<std::filesystem::path> paths(report_files.begin(),
                                                     report_files.end());
            std::cout << flam::cmd_report(paths);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        action();
        return 0;
    } catch (const flam::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const flam::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const flam::TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
