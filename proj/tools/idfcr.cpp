#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

#include "idfcr/error.hpp"
#include "idfcr/harness.hpp"

using namespace idfcr;
using nlohmann::json;

namespace {

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IDF-CR cloud removal: data synthesis, training, inference and evaluation"};
  app.set_config("--config", "", "Flat key = value run config; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();
  app.require_subcommand(1);
  harness::RunConfig config;
  harness::bind_config(app, config);

  auto* make_data = app.add_subcommand("make-data", "Write synthetic train/test pairs");
  std::string data_out;
  make_data->add_option("--out", data_out, "Output root (default: data_dir)");

  auto* train = app.add_subcommand("train", "Train one phase");
  std::string phase;
  std::int64_t train_steps = 0;
  train->add_option("--phase", phase, "pixel, codec, trunk or control")->required();
  train->add_option("--steps", train_steps, "Cap on optimizer steps");

  auto* infer = app.add_subcommand("infer", "Restore cloudy images");
  std::string input, infer_out = "out";
  int sample_steps = 0;
  infer->add_option("input", input, "Cloudy PNG, directory of PNGs, or pair directory")->required();
  infer->add_option("--out", infer_out, "Output root for lq/ and hq/");
  infer->add_option("--steps", sample_steps, "Sampler steps (default: sample_steps)");

  auto* eval = app.add_subcommand("eval", "Score predictions against labels");
  std::string pred_dir, label_dir, report_out;
  eval->add_option("pred_dir", pred_dir)->required();
  eval->add_option("label_dir", label_dir)->required();
  eval->add_option("--out", report_out, "Also write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  } catch (const Error& e) {
    print_error(std::string(to_string(e.kind())), e.what());
    return 2;
  }

  try {
    if (*make_data) {
      const std::string out = data_out.empty() ? config.data_dir : data_out;
      const auto r = harness::cmd_make_data(config, out, [](const std::string& msg) {
        std::cerr << json{{"warning", msg}}.dump() << std::endl;
      });
      std::cout << json{{"train", r.train}, {"test", r.test}, {"out", out}}.dump() << std::endl;
    } else if (*train) {
      const harness::Phase p = harness::parse_phase(phase);
      const auto ckpt = harness::cmd_train(config, p, train_steps);
      std::cout << json{{"phase", phase},
                        {"steps", ckpt.step},
                        {"checkpoint", harness::checkpoint_path(config, p).string()},
                        {"log", harness::log_path(config, p).string()}}
                       .dump()
                << std::endl;
    } else if (*infer) {
      const auto ids = harness::cmd_infer(config, input, infer_out, config.seed, sample_steps);
      std::cout << json{{"images", ids}, {"out", infer_out}}.dump() << std::endl;
    } else if (*eval) {
      const std::string report = harness::report_json(harness::cmd_eval(pred_dir, label_dir));
      if (!report_out.empty()) {
        std::ofstream f(report_out);
        f << report << '\n';
        if (!f) throw IoError("cannot write " + report_out);
      }
      std::cout << report << std::endl;
    }
  } catch (const Error& e) {
    print_error(std::string(to_string(e.kind())), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
