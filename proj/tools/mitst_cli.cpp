#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>

#include "mitst/pipeline.hpp"
#include "mitst/service.hpp"

namespace fs = std::filesystem;
using namespace mitst;

namespace {

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

int serve(Pipeline& pipeline, std::string host, int port, std::string checkpoint, std::string templates) {
    const auto& sc = pipeline.config().serve;
    if (host.empty()) host = sc.host;
    if (port < 0) port = std::stoi(env_or("MITST_PORT", std::to_string(sc.port)));
    if (checkpoint.empty()) checkpoint = env_or("MITST_CHECKPOINT", pipeline.checkpoint_path(sc.checkpoint).string());
    if (!fs::exists(checkpoint)) throw MissingArtifact(checkpoint);
    if (templates.empty()) {
        templates = sc.templates;
        if (templates.empty() && fs::exists(pipeline.out() / "eval" / "templates.json"))
            templates = (pipeline.out() / "eval" / "templates.json").string();
    } else if (!fs::exists(templates)) {
        throw MissingArtifact(templates);
    }

    InferenceServer server;
    server.load(checkpoint);
    if (!templates.empty()) server.set_templates(read_json_file(templates));

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    const int bound = server.start(host, port);
    std::cerr << "serving " << checkpoint << " on http://" << host << ":" << bound << std::endl;
    std::cout << "port " << bound << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-source irregular time series transformer: cohort generation, training, evaluation, serving"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool quiet = false;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--out", out_dir, std::string("output root (default: $") + kOutputRootEnv + " or ./mitst_out)");
    app.add_option("--seed", seed, "seed for every stage");
    app.add_option("--set", overrides, "dotted override, e.g. train.epochs=10")->take_all();
    app.add_flag("--quiet,-q", quiet, "no progress output");

    for (const char* name : {"generate", "preprocess", "train", "evaluate", "finetune"}) app.add_subcommand(name);
    auto* predict = app.add_subcommand("predict", "predict from a request file");
    std::string input, checkpoint;
    predict->add_option("--input", input, "request JSON, array of requests, or templates file");
    predict->add_option("--checkpoint", checkpoint, "checkpoint (default: <out>/train/checkpoint.mitst)");
    auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
    std::string host, templates;
    int port = -1;
    serve_cmd->add_option("--host", host);
    serve_cmd->add_option("--port", port, "0 picks a free port (default: $MITST_PORT or config)");
    serve_cmd->add_option("--checkpoint", checkpoint, "(default: $MITST_CHECKPOINT or <out>/train/checkpoint.mitst)");
    serve_cmd->add_option("--templates", templates);
    app.get_subcommand("generate")->description("write a synthetic cohort");
    app.get_subcommand("preprocess")->description("split by patient and fit the normalizer");
    app.get_subcommand("train")->description("train with undersampling and early stopping");
    app.get_subcommand("evaluate")->description("test-split reports, curves and templates");
    app.get_subcommand("finetune")->description("adapt the trained model to a second task");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        auto config = load_pipeline_config(config_path, overrides, seed);
        if (!input.empty()) config.predict.input = input;
        if (!checkpoint.empty() && predict->parsed()) config.predict.checkpoint = checkpoint;
        const fs::path out = out_dir.empty() ? fs::path(env_or(kOutputRootEnv, "mitst_out")) : fs::path(out_dir);
        Pipeline pipeline(config, out, quiet ? nullptr : &std::cerr);

        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "generate") pipeline.generate();
        else if (cmd == "preprocess") pipeline.preprocess();
        else if (cmd == "train") pipeline.train();
        else if (cmd == "evaluate") pipeline.evaluate();
        else if (cmd == "finetune") pipeline.finetune();
        else if (cmd == "predict") {
            const auto r = pipeline.predict();
            std::cout << read_json_file(r.dir / "predictions.json").dump(2) << std::endl;
        } else if (cmd == "serve") {
            return serve(pipeline, host, port, checkpoint, templates);
        }
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const RequestError& e) {
        std::cerr << "error: invalid request: " << e.to_json().dump() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
