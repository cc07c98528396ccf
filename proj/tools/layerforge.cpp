// layerforge command-line entry point.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "layerforge/checkpoint.hpp"
#include "layerforge/eval.hpp"
#include "layerforge/manifest.hpp"
#include "layerforge/sampler.hpp"
#include "layerforge/scene.hpp"
#include "layerforge/service.hpp"
#include "layerforge/train.hpp"

namespace fs = std::filesystem;
using namespace layerforge;

namespace {

TrainConfig load_train_config(const std::string& path) {
    if (path.empty()) {
        return {};
    }
    const auto bytes = read_file(path);
    try {
        return train_config_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

FlowModel load_model(const std::string& path) { return load_checkpoint(read_file(path)).model(); }

int cmd_gen_data(std::uint64_t seed, int scenes, const std::string& out, const std::string& config) {
    const auto cfg = load_train_config(config);
    fs::create_directories(out);
    for (const auto& s : gen_scenes(seed, scenes, cfg.scene, cfg.model)) {
        save_scene(s, out);
    }
    std::cout << "wrote " << scenes << " scenes to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config, const std::string& out) {
    const auto cfg = load_train_config(config);
    double window = 0.0;
    int n = 0;
    train(cfg, out, [&](const StepLog& s) {
        window += s.loss;
        ++n;
        if (cfg.eval_interval > 0 && s.step % cfg.eval_interval == 0) {
            std::printf("step %lld  loss %.5f  locked %.2f  %.1fs\n", static_cast<long long>(s.step), window / n,
                        s.locked_fraction, s.wallclock_ms / 1000.0);
            std::fflush(stdout);
            window = 0.0;
            n = 0;
        }
    });
    std::cout << "checkpoint: " << (fs::path(out) / "final.lckp").string() << "\n";
    return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& canvas_path, int steps, std::uint64_t seed,
                 const std::string& out) {
    const FlowModel model = load_model(checkpoint);
    const auto text = read_file(canvas_path);
    const auto canvas = parse_manifest(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()));
    SampleConfig cfg;
    cfg.steps = steps;
    cfg.seed = seed;
    ConditionSummary summary;
    const Image img = euler_sample(model, canvas, cfg, &summary);
    save_png(out, img);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : summary.layers) {
        layers.push_back({{"id", l.id}, {"locked", l.locked}, {"layer_axis", l.layer_axis}, {"tokens", l.tokens}});
    }
    const nlohmann::json sidecar = {
        {"condition_tokens", summary.total}, {"layers", layers}, {"steps", steps}, {"seed", seed}};
    write_file(out + ".json", sidecar.dump(2) + "\n");
    std::cout << "wrote " << out << " (" << summary.total << " condition tokens)\n";
    return 0;
}

int cmd_serve(const std::string& checkpoint, std::string addr) {
    if (const char* env = std::getenv("LAYERFORGE_ADDR"); env && *env) {
        addr = env;
    }
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) {
        throw std::invalid_argument("address must be host:port, got '" + addr + "'");
    }
    const std::string host = addr.substr(0, colon);
    const int port = std::stoi(addr.substr(colon + 1));
    Service service(load_model(checkpoint));
    httplib::Server server;
    mount(server, service);
    std::cout << "listening on " << host << ":" << port << "\n" << std::flush;
    if (!server.listen(host, port)) {
        throw std::runtime_error("cannot listen on " + addr);
    }
    return 0;
}

int cmd_grad_check(const std::string& config) {
    const auto cfg = load_train_config(config);
    const auto report = model_grad_check(cfg);
    std::printf("max relative error %.3e (%s[%zu]: analytic %.6e, numeric %.6e)\n", report.max_rel_error,
                report.worst_param.c_str(), report.worst_index, report.worst_analytic, report.worst_numeric);
    if (report.max_rel_error > 1e-4) {
        std::fprintf(stderr, "grad-check failed: max relative error %.3e exceeds 1e-4\n", report.max_rel_error);
        return 1;
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& scenes_dir, const std::string& report_path) {
    const auto st = load_checkpoint(read_file(checkpoint));
    const FlowModel model = st.model();
    const auto scenes = load_scenes(scenes_dir);
    if (scenes.empty()) {
        throw std::runtime_error("no scenes found under " + scenes_dir);
    }
    SampleConfig cfg;
    cfg.seed = st.config.seed;
    const auto mixed = evaluate_model(model, mixed_lock_probes(scenes, 16, st.config.seed), cfg);
    const auto locked = evaluate_model(model, all_locked_probes(scenes, 16, st.config.seed), cfg);
    const nlohmann::json report = {{"mixed_lock", report_json(mixed)},
                                   {"all_locked", report_json(locked)},
                                   {"steps", cfg.steps}};
    write_file(report_path, report.dump(2) + "\n");
    auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
    std::cout << "locked PSNR " << show(mixed.mean_locked_psnr()) << " dB, unlocked PSNR "
              << show(mixed.mean_unlocked_psnr()) << " dB, all-locked PSNR " << show(locked.mean_locked_psnr())
              << " dB, hue error " << show(mixed.mean_hue_error()) << " deg\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layerforge: layered-canvas flow-matching toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    int scenes = 16, steps = 16;
    std::string out, config, checkpoint, canvas, addr = "127.0.0.1:8080", scenes_dir, report;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
    gen->add_option("--seed", seed, "Generator seed");
    gen->add_option("--scenes", scenes, "Number of scenes")->check(CLI::PositiveNumber);
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--config", config, "Training config whose scene/model settings apply");

    auto* tr = app.add_subcommand("train", "Train a model");
    tr->add_option("--config", config, "Training config JSON");
    tr->add_option("--out", out, "Output directory")->required();

    auto* ge = app.add_subcommand("generate", "Generate an image for a canvas manifest");
    ge->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    ge->add_option("--canvas", canvas, "Canvas manifest JSON")->required();
    ge->add_option("--steps", steps, "Euler steps")->check(CLI::PositiveNumber);
    ge->add_option("--seed", seed, "Noise seed");
    ge->add_option("--out", out, "Output PNG")->required();

    auto* sv = app.add_subcommand("serve", "Serve the HTTP API");
    sv->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    sv->add_option("--addr", addr, "host:port (LAYERFORGE_ADDR overrides)");

    auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient check of the model loss");
    gc->add_option("--config", config, "Training config JSON");

    auto* ev = app.add_subcommand("eval", "Locked fidelity and identity report");
    ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    ev->add_option("--scenes", scenes_dir, "Scene directory from gen-data")->required();
    ev->add_option("--report", report, "Output JSON report")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (*gen) return cmd_gen_data(seed, scenes, out, config);
        if (*tr) return cmd_train(config, out);
        if (*ge) return cmd_generate(checkpoint, canvas, steps, seed, out);
        if (*sv) return cmd_serve(checkpoint, addr);
        if (*gc) return cmd_grad_check(config);
        if (*ev) return cmd_eval(checkpoint, scenes_dir, report);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& c : msg) {
            if (c == '\n') c = ' ';
        }
        std::cerr << "error: " << msg << "\n";
        return 1;
    }
    return 2;
}
