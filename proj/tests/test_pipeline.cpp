#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "flam/error.hpp"
#include "flam/io_util.hpp"
#include "flam/pipeline.hpp"

namespace fs = std::filesystem;
using flam::RunConfig;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("flam_pipeline_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

nlohmann::json small_run_json() {
    return {
        {"seed", 7},
        {"data", {{"dim", 32}, {"instances", 80}, {"views", 2}}},
        {"embedder", {{"k", 6}, {"epochs", 2}, {"batch_size", 64}}},
        {"manipulator",
         {{"target_attr", "shape"}, {"epochs", 1}, {"hidden", 32}}},
        {"eval", {{"ks", {1, 5}}, {"probe", {{"epochs", 4}}}}},
    };
}

nlohmann::json read_json(const fs::path& path) {
    const std::vector<char> buf = flam::io::read_file(path);
    return nlohmann::json::parse(std::string(buf.begin(), buf.end()));
}

bool is_sha256(const std::string& s) {
    if (s.size() != 64) return false;
    for (char c : s) {
        if (!(('0' <= c && c <= '9') || ('a' <= c && c <= 'f'))) return false;
    }
    return true;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FLAM_CLI_PATH) + " " + args +
                            " > /dev/null 2> /dev/null";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("run config parsing") {
    SUBCASE("empty object gives usable defaults") {
        const RunConfig c = flam::run_config_from_json(nlohmann::json::object());
        CHECK(c.seed == 0);
        CHECK(c.schema.n_types() == 3);
        CHECK(c.embedders.size() == 3);
        CHECK(c.manipulator.target_attr == c.schema.types.front());
        CHECK(c.fractions.train + c.fractions.query + c.fractions.gallery ==
              doctest::Approx(1.0));
        CHECK(c.paths.train == "train.flamfeat");
        CHECK(c.paths.manifest == "manifest.json");
    }

    SUBCASE("master seed reaches every stage unless pinned") {
        nlohmann::json j = {{"seed", 9},
                            {"manipulator", {{"seed", 3}}}};
        const RunConfig c = flam::run_config_from_json(j);
        CHECK(c.data_seed == 9);
        CHECK(c.split_seed == 9);
        for (const auto& e : c.embedders) CHECK(e.seed == 9);
        CHECK(c.manipulator.seed == 3);
        CHECK(c.eval.seed == 9);
    }

    SUBCASE("per-type embedder overrides merge over the base") {
        nlohmann::json j = {{"embedder", {{"k", 8}, {"epochs", 5}}},
                            {"embedders", {{"shape", {{"k", 4}}}}}};
        const RunConfig c = flam::run_config_from_json(j);
        CHECK(c.embedders[0].k == 4);
        CHECK(c.embedders[0].epochs == 5);
        CHECK(c.embedders[1].k == 8);
        CHECK(c.embedders[2].k == 8);
    }

    SUBCASE("unknown keys are rejected") {
        CHECK_THROWS_AS(flam::run_config_from_json({{"sede", 1}}),
                        flam::ConfigError);
        CHECK_THROWS_AS(
            flam::run_config_from_json({{"embedders", {{"texture", {{"k", 2}}}}}}),
            flam::ConfigError);
        CHECK_THROWS_AS(
            flam::run_config_from_json({{"paths", {{"trian", "x"}}}}),
            flam::ConfigError);
        CHECK_THROWS_AS(flam::run_config_from_json({{"seed", "woof"}}),
                        flam::ConfigError);
    }

    SUBCASE("round trip is stable") {
        const RunConfig c = flam::run_config_from_json(small_run_json());
        const nlohmann::json j = flam::run_config_to_json(c);
        const RunConfig c2 = flam::run_config_from_json(j);
        CHECK(flam::run_config_to_json(c2).dump() == j.dump());
        CHECK(c2.embedders[0].k == 6);
        CHECK(c2.manipulator.hidden == 32);
        CHECK(c2.eval.ks == std::vector<std::size_t>{1, 5});
    }
}

TEST_CASE("apply_override") {
    nlohmann::json j = small_run_json();

    flam::apply_override(j, "manipulator.epochs=3");
    CHECK(j["manipulator"]["epochs"] == 3);

    flam::apply_override(j, "manipulator.target_attr=color");
    CHECK(j["manipulator"]["target_attr"] == "color");

    flam::apply_override(j, "data.fractions.train=0.5");
    CHECK(j["data"]["fractions"]["train"] == 0.5);

    flam::apply_override(j, "eval.ks=[1,2]");
    CHECK(j["eval"]["ks"] == nlohmann::json({1, 2}));

    nlohmann::json fresh = nlohmann::json::object();
    flam::apply_override(fresh, "a.b.c=1");
    CHECK(fresh["a"]["b"]["c"] == 1);

    CHECK_THROWS_AS(flam::apply_override(j, "noequalsign"),
                    flam::ConfigError);
    CHECK_THROWS_AS(flam::apply_override(j, "=5"), flam::ConfigError);
    CHECK_THROWS_AS(flam::apply_override(j, "seed..x=1"), flam::ConfigError);
    CHECK_THROWS_AS(flam::apply_override(j, "seed.inner=1"),
                    flam::ConfigError);
}

TEST_CASE("variant_name") {
    flam::ManipConfig c;
    c.matching = flam::Matching::M;
    c.sampling = flam::Sampling::os;
    c.lambda_adv = 1.0;
    CHECK(flam::variant_name(c) == "M/OS/Adv");
    c.sampling = flam::Sampling::uniform;
    CHECK(flam::variant_name(c) == "M/-/Adv");
    c.lambda_adv = 0.0;
    CHECK(flam::variant_name(c) == "M/-/-");
    c.matching = flam::Matching::S;
    c.lambda_adv = 0.5;
    CHECK(flam::variant_name(c) == "S/-/Adv");
}

TEST_CASE("pipeline stages") {
    TempDir dir;
    const RunConfig config = flam::run_config_from_json(small_run_json());

    SUBCASE("stages run in order and leave a consistent manifest") {
        const auto data_files = flam::cmd_gen_data(config, dir.path);
        REQUIRE(data_files.size() == 3);
        for (const fs::path& p : data_files) CHECK(fs::exists(p));

        nlohmann::json manifest = read_json(dir.path / "manifest.json");
        CHECK(manifest["tool_version"] == std::string(flam::kToolVersion));
        REQUIRE(manifest["stages"].contains("gen-data"));
        const nlohmann::json first_hashes =
            manifest["stages"]["gen-data"]["artifacts"];
        REQUIRE(first_hashes.size() == 3);
        for (const auto& item : first_hashes.items()) {
            CHECK(is_sha256(item.value().get<std::string>()));
        }
        CHECK(manifest["stages"]["gen-data"]["config"]["seed"] == 7);

        // rerunning the stage reproduces the artifact bytes
        flam::cmd_gen_data(config, dir.path);
        manifest = read_json(dir.path / "manifest.json");
        CHECK(manifest["stages"]["gen-data"]["artifacts"] == first_hashes);

        const auto emb_files = flam::cmd_train_embedders(config, dir.path);
        REQUIRE(emb_files.size() == 6);  // checkpoint + sidecar per type
        const nlohmann::json sidecar =
            read_json(dir.path / "embedder_shape.flamemb.log.json");
        CHECK(sidecar["attr_type"] == "shape");
        CHECK(sidecar["epoch_loss"].size() == 2);
        manifest = read_json(dir.path / "manifest.json");
        CHECK(manifest["stages"].contains("gen-data"));
        CHECK(manifest["stages"].contains("train-embedders"));

        const auto gan_files = flam::cmd_train_manipulator(config, dir.path);
        REQUIRE(gan_files.size() == 2);
        manifest = read_json(dir.path / "manifest.json");
        CHECK(manifest["stages"]["train-manipulator"]["variant"] ==
              "M/-/Adv");
        const nlohmann::json gan_log =
            read_json(dir.path / "manipulator.flamgan.log.json");
        REQUIRE(gan_log["epochs"].size() == 1);
        CHECK(gan_log["epochs"][0].contains("proxy"));
        CHECK(gan_log["variant"] == "M/-/Adv");

        const auto eval_files = flam::cmd_evaluate(config, dir.path);
        REQUIRE(eval_files.size() == 2);
        const nlohmann::json report = read_json(dir.path / "report.json");
        CHECK(report.contains("r_at_k"));
        CHECK(report.contains("t_at_k"));
        CHECK(report.contains("probe_delta"));
        const std::string report_hash =
            flam::io::sha256_file(dir.path / "report.json");

        // evaluation is a pure function of the artifacts and the config
        flam::cmd_evaluate(config, dir.path);
        CHECK(flam::io::sha256_file(dir.path / "report.json") == report_hash);

        flam::ManipulateArgs args;
        args.manipulator = dir.path / "manipulator.flamgan";
        args.embedders = {dir.path / "embedder_shape.flamemb",
                          dir.path / "embedder_color.flamemb",
                          dir.path / "embedder_pattern.flamemb"};
        args.gallery = dir.path / "gallery.flamfeat";
        args.queries = dir.path / "query.flamfeat";
        args.attr_type = "color";
        args.target_class = 3;
        args.k = 5;
        const std::string out = flam::cmd_manipulate(args);
        std::istringstream lines(out);
        std::string line;
        std::size_t rank = 0;
        while (std::getline(lines, line)) {
            rank += 1;
            std::size_t parsed_rank = 0;
            unsigned long long id = 0;
            double sim = 0.0;
            REQUIRE(std::sscanf(line.c_str(), "%zu,%llu,%lf", &parsed_rank,
                                &id, &sim) == 3);
            CHECK(parsed_rank == rank);
            CHECK(sim >= -1.0);
            CHECK(sim <= 1.0);
        }
        CHECK(rank == 5);

        CHECK_THROWS_AS(
            [&] {
                flam::ManipulateArgs bad = args;
                bad.attr_type = "texture";
                flam::cmd_manipulate(bad);
            }(),
            flam::ConfigError);
        CHECK_THROWS_AS(
            [&] {
                flam::ManipulateArgs bad = args;
                bad.target_class = 99;
                flam::cmd_manipulate(bad);
            }(),
            flam::ConfigError);
        CHECK_THROWS_AS(
            [&] {
                flam::ManipulateArgs bad = args;
                bad.query_index = 1000000;
                flam::cmd_manipulate(bad);
            }(),
            flam::ConfigError);
        CHECK_THROWS_AS(
            [&] {
                flam::ManipulateArgs bad = args;
                bad.k = 0;
                flam::cmd_manipulate(bad);
            }(),
            flam::ConfigError);

        const fs::path copy = dir.path / "other.json";
        fs::copy_file(dir.path / "report.json", copy);
        const std::string table =
            flam::cmd_report({dir.path / "report.json", copy});
        CHECK(table.find("T@5/shape") != std::string::npos);
        CHECK(table.find("report") != std::string::npos);
        CHECK(table.find("other") != std::string::npos);
        CHECK_THROWS_AS(flam::cmd_report({}), flam::ConfigError);
    }

    SUBCASE("missing inputs are data errors") {
        CHECK_THROWS_AS(flam::cmd_train_embedders(config, dir.path),
                        flam::DataError);
        CHECK_THROWS_AS(flam::cmd_evaluate(config, dir.path),
                        flam::DataError);
    }

    SUBCASE("schema drift between config and data files is caught") {
        flam::cmd_gen_data(config, dir.path);
        nlohmann::json other = small_run_json();
        other["schema"] = {{"types", {"shape", "color", "pattern"}},
                           {"class_counts", {4, 4, 4}}};
        const RunConfig drifted = flam::run_config_from_json(other);
        CHECK_THROWS_AS(flam::cmd_train_embedders(drifted, dir.path),
                        flam::ConfigError);
    }

    SUBCASE("invalid fraction sum fails before writing anything") {
        nlohmann::json j = small_run_json();
        j["data"]["fractions"] = {{"train", 0.9}, {"query", 0.9},
                                  {"gallery", 0.9}};
        const RunConfig bad = flam::run_config_from_json(j);
        CHECK_THROWS_AS(flam::cmd_gen_data(bad, dir.path), flam::ConfigError);
        CHECK_FALSE(fs::exists(dir.path / "train.flamfeat"));
    }
}

TEST_CASE("command line binary") {
    TempDir dir;
    const fs::path config_path = dir.path / "run.json";
    {
        std::ofstream out(config_path);
        out << small_run_json().dump(2) << "\n";
    }
    const std::string base = "--config " + config_path.string() + " --out " +
                             dir.path.string();

    CHECK(run_cli("--version") == 0);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("gen-data --config " + dir.path.string() +
                  "/missing.json") == 2);
    CHECK(run_cli("gen-data " + base + " --set data=5") == 2);
    CHECK(run_cli("gen-data " + base) == 0);
    CHECK(fs::exists(dir.path / "train.flamfeat"));
    CHECK(run_cli("train-embedders --config " + config_path.string() +
                  " --out " + dir.path.string() + "/empty") == 3);
    // --seed overrides the master seed, so the bytes must differ
    const std::string before =
        flam::io::sha256_file(dir.path / "train.flamfeat");
    CHECK(run_cli("gen-data " + base + " --seed 99") == 0);
    CHECK(flam::io::sha256_file(dir.path / "train.flamfeat") != before);
    CHECK(run_cli("gen-data " + base) == 0);
    CHECK(flam::io::sha256_file(dir.path / "train.flamfeat") == before);
}
