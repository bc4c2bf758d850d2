#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "mitst/pipeline.hpp"

using namespace mitst;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> tiny_overrides() {
    return {"generator.n_patients=60",
            "generator.target_prevalences=null",
            "model.depth=1",
            "model.heads=1",
            "model.head_dim=4",
            "model.joint_width=8",
            "model.fusion_width=8",
            "model.embed_widths=[4,4,4,4,4]",
            "model.max_seq_len=16",
            "train.epochs=1",
            "evaluate.bootstrap_resamples=100",
            "evaluate.permutations=10",
            "finetune.train.epochs=1"};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mitst_unit_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_text_file(e.path());
    return out;
}

#ifdef MITST_CLI_PATH
int run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " \"" + std::string(MITST_CLI_PATH) + "\" -q " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
#endif

}  // namespace

TEST_CASE("overrides: dotted keys, JSON values, strings, unknown keys refused") {
    json j = json::object();
    apply_override(j, "train.epochs=7");
    apply_override(j, "model.embed_widths=[1,2]");
    apply_override(j, "serve.host=0.0.0.0");
    CHECK(j["train"]["epochs"] == 7);
    CHECK(j["model"]["embed_widths"] == json::array({1, 2}));
    CHECK(j["serve"]["host"] == "0.0.0.0");
    CHECK_THROWS_AS(apply_override(j, "novalue"), UsageError);
    CHECK_THROWS_AS(apply_override(j, "a..b=1"), UsageError);
    CHECK_THROWS_AS(apply_override(j, "train.epochs.x=1"), UsageError);

    const auto c = load_pipeline_config({}, {"train.epochs=7", "evaluate.permutations=3"});
    CHECK(c.train.epochs == 7);
    CHECK(c.evaluate.permutations == 3);
    CHECK_THROWS_WITH_AS(load_pipeline_config({}, {"train.epoch=7"}), doctest::Contains("epoch"), UsageError);
    CHECK_THROWS_AS(load_pipeline_config({}, {"bogus.x=1"}), UsageError);
    CHECK_THROWS_AS(load_pipeline_config("/nonexistent/config.json", {}), UsageError);
}

TEST_CASE("config round trip, hash, and the global seed") {
    const auto c = load_pipeline_config(fs::path(MITST_SOURCE_DIR) / "configs" / "default.json", {});
    CHECK(PipelineConfig::from_json(c.to_json()).hash() == c.hash());
    auto d = c;
    d.train.epochs += 1;
    CHECK(d.hash() != c.hash());

    const auto seeded = load_pipeline_config({}, {}, 99);
    const auto other = load_pipeline_config({}, {}, 100);
    CHECK(seeded.generator.seed != other.generator.seed);
    CHECK(seeded.train.seed != other.train.seed);
    CHECK(seeded.hash() == load_pipeline_config({}, {}, 99).hash());
}

TEST_CASE("commands refuse to run without their upstream artifacts") {
    const auto out = scratch("missing");
    Pipeline p(load_pipeline_config({}, tiny_overrides()), out);
    CHECK_THROWS_AS(p.preprocess(), MissingArtifact);
    CHECK_THROWS_AS(p.train(), MissingArtifact);
    CHECK_THROWS_AS(p.evaluate(), MissingArtifact);
    CHECK_THROWS_AS(p.finetune(), MissingArtifact);
    fs::remove_all(out);
}

TEST_CASE("the whole pipeline reruns byte for byte") {
    const auto config = load_pipeline_config({}, tiny_overrides());
    const auto out = scratch("rerun");
    std::map<std::string, std::string> first;
    for (int round = 0; round < 2; ++round) {
        Pipeline p(config, out);
        p.generate();
        p.preprocess();
        p.train();
        p.evaluate();
        p.finetune();
        if (round == 0) first = tree(out);
    }
    const auto second = tree(out);
    REQUIRE(first.size() == second.size());
    for (const auto& [name, body] : first) CHECK_MESSAGE(second.at(name) == body, name);
    CHECK(first.count("eval/report_test.json"));
    CHECK(first.count("train/checkpoint.mitst"));
    CHECK(first.count("finetune/freeze_check.json"));

    const auto manifest = read_json_file(out / "train" / "run_manifest.json");
    CHECK(manifest["config_hash"] == config.hash());
    CHECK(manifest["artifacts"]["checkpoint.mitst"] == file_sha256(out / "train" / "checkpoint.mitst"));
    fs::remove_all(out);
}

TEST_CASE("predict inputs: one request, an array, or templates") {
    const json one = {{"sources", json::object()}};
    CHECK(collect_requests(one).size() == 1);
    CHECK(collect_requests(json::array({one, one})).size() == 2);
    const json templates = json::array({{{"name", "t"}, {"request", one}}});
    REQUIRE(collect_requests(templates).size() == 1);
    CHECK(collect_requests(templates)[0] == one);
}

#ifdef MITST_CLI_PATH
TEST_CASE("command-line exit codes") {
    const auto out = scratch("cli");
    const std::string o = "--out \"" + out.string() + "\" ";
    CHECK(run_cli("") == 2);
    CHECK(run_cli(o + "frobnicate") == 2);
    CHECK(run_cli(o + "--set train.epoch=3 train") == 2);
    CHECK(run_cli(o + "--config /nonexistent.json train") == 2);
    CHECK(run_cli(o + "train") == 2);

    std::string sets;
    for (const auto& s : tiny_overrides()) sets += "--set " + s + " ";
    CHECK(run_cli(sets + "generate", "MITST_OUT=\"" + out.string() + "\"") == 0);
    CHECK(fs::exists(out / "cohort" / "schema.json"));
    CHECK(run_cli(o + sets + "preprocess") == 0);

    fs::create_directories(out / "train");
    write_text_file(out / "train" / "checkpoint.mitst", "not a checkpoint");
    write_text_file(out / "req.json", R"({"sources": {}})");
    CHECK(run_cli(o + "predict --input \"" + (out / "req.json").string() + "\"") == 1);
    fs::remove_all(out);
}
#endif
