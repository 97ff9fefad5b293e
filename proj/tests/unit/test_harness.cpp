#include <doctest.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "idfcr/error.hpp"
#include "idfcr/harness.hpp"
#include "idfcr/image_io.hpp"
#include "support/temp_dir.hpp"

using namespace idfcr;
using namespace idfcr::harness;
namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

namespace {

RunConfig tiny_config(const fs::path& root) {
  RunConfig c;
  c.train_pairs = 4;
  c.test_pairs = 2;
  c.image_size = 16;
  c.pixel.image_size = 16;
  c.pixel.channels = 8;
  c.pixel.heads = 2;
  c.pixel.window_size = 4;
  c.pixel.num_blocks = 2;
  c.codec.latent_dim = 2;
  c.codec.width = 8;
  c.codec.codebook_size = 16;
  c.unet.latent_dim = 2;
  c.unet.base_width = 8;
  c.unet.groups = 2;
  c.unet.heads = 2;
  c.pixel_epochs = 2;
  c.codec_steps = 12;
  c.codec_restart_every = 4;
  c.codec_restart_until = 8;
  c.trunk_steps = 6;
  c.diffusion_epochs = 1;
  c.sample_steps = 8;
  c.seed = 5;
  c.data_dir = (root / "data").string();
  c.run_dir = (root / "run").string();
  return c;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<json> read_log(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

int count_files(const fs::path& dir) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

void train_all(const RunConfig& c) {
  cmd_make_data(c, c.data_dir);
  for (Phase p : {Phase::pixel, Phase::codec, Phase::trunk, Phase::control}) cmd_train(c, p);
}

struct CliResult {
  int status = 0;
  std::string err;
};

CliResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string(IDFCR_CLI) + " " + args + " > " + (scratch / "stdout.txt").string() +
                          " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, file_bytes(err)};
}

}  // namespace

TEST_CASE("config defaults follow the paper") {
  const RunConfig c;
  CHECK(c.pixel_batch == 1);
  CHECK(c.pixel_epochs == 200);
  CHECK(c.pixel_lr == 4e-4);
  CHECK(c.diffusion_batch == 2);
  CHECK(c.diffusion_epochs == 100);
  CHECK(c.diffusion_lr == 1e-4);
  CHECK(c.sample_steps == 50);
  CHECK(c.inr.K == 3);
  CHECK(c.image_size == 64);
  CHECK(c.train_pairs == 16);
  CHECK(c.T == 64);
  CHECK(c.schedule().a_bar_at(64) < 0.05);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config text") {
  test::TempDir dir;
  RunConfig c = tiny_config(dir.path());
  c.pixel_lr = 0.1 + 0.2;
  c.beta_end = 1.0 / 3.0;
  c.rescale_betas = false;
  c.data_dir = "with space/\"quoted\"";
  const std::string text = config_to_string(c);
  const RunConfig back = config_from_string(text);
  CHECK(config_to_string(back) == text);
  CHECK(back.pixel_lr == c.pixel_lr);
  CHECK(back.beta_end == c.beta_end);
  CHECK(back.data_dir == c.data_dir);
  CHECK(back.pixel.image_size == 16);
  CHECK(back.unet.latent_dim == 2);

  save_config(dir.path() / "run.cfg", c);
  CHECK(config_to_string(load_config(dir.path() / "run.cfg")) == text);

  CHECK_THROWS_AS(config_from_string("no_such_key = 3\n"), ConfigError);
  CHECK_THROWS_AS(config_from_string("pixel_lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(config_from_string("train_pairs = 2.5\n"), ConfigError);
  CHECK_THROWS_AS(load_config(dir.path() / "missing.cfg"), IoError);
}

TEST_CASE("flags override the config file") {
  test::TempDir dir;
  RunConfig file_values;
  file_values.seed = 11;
  file_values.pixel_lr = 0.5;
  file_values.inr.K = 2;
  save_config(dir.path() / "a.cfg", file_values);

  RunConfig c;
  CLI::App app;
  app.set_config("--config");
  bind_config(app, c);
  const std::string cfg = (dir.path() / "a.cfg").string();
  const char* argv[] = {"idfcr", "--config", cfg.c_str(), "--seed", "12", "--inr-k", "4"};
  app.parse(7, const_cast<char**>(argv));
  CHECK(c.seed == 12);
  CHECK(c.inr.K == 4);
  CHECK(c.pixel_lr == 0.5);
}

TEST_CASE("config validation") {
  test::TempDir dir;
  RunConfig c = tiny_config(dir.path());
  CHECK_NOTHROW(c.validate());
  c.sample_steps = 65;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(dir.path());
  c.image_size = 20;  // 5x5 latent cannot be halved
  c.pixel.image_size = 20;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config(dir.path());
  c.pixel_lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_phase("warmup"), ConfigError);
  CHECK(parse_phase("control") == Phase::control);
}

TEST_CASE("checkpoint round trip") {
  test::TempDir dir;
  nn::Rng rng(1);
  Checkpoint c;
  c.phase = Phase::codec;
  c.step = 1234;
  c.config = config_to_string(RunConfig{});
  c.tensors["b.weight"] = rng.normal_tensor({3, 2, 2});
  c.tensors["a.bias"] = rng.normal_tensor({5});
  c.tensors["a.bias"][0] = -0.0;
  c.scalars["latent_scale"] = 1.0 / 3.0;

  const fs::path first = dir.path() / "one.ckpt", second = dir.path() / "two.ckpt";
  save_checkpoint(first, c);
  const Checkpoint loaded = load_checkpoint(first);
  save_checkpoint(second, loaded);
  CHECK(file_bytes(first) == file_bytes(second));
  CHECK(loaded.phase == Phase::codec);
  CHECK(loaded.step == 1234);
  CHECK(loaded.config == c.config);
  CHECK(loaded.scalars.at("latent_scale") == 1.0 / 3.0);
  for (const auto& [name, t] : c.tensors) CHECK(nn::bit_equal(loaded.tensors.at(name), t));

  auto bytes = serialize(c);
  bytes[8] = 99;  // version field
  CHECK_THROWS_AS(deserialize(bytes), VersionError);
  bytes = serialize(c);
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize(bytes), VersionError);
  CHECK_THROWS_AS(deserialize({'n', 'o', 'p', 'e'}), VersionError);
}

TEST_CASE("restore checks names and shapes") {
  nn::ParamSet params;
  params.add("w", nn::make_param(Tensor({2, 3}, 1.0)));
  Checkpoint c;
  c.tensors["w"] = Tensor({2, 3}, 7.0);
  restore(c, params);
  CHECK(params.get("w").value()[5] == 7.0);
  c.tensors["w"] = Tensor({3, 2}, 7.0);
  CHECK_THROWS_AS(restore(c, params), VersionError);
  c.tensors.clear();
  CHECK_THROWS_AS(restore(c, params), VersionError);
  c.tensors["w"] = Tensor({2, 3});
  c.tensors["extra"] = Tensor({1});
  CHECK_THROWS_AS(restore(c, params), VersionError);
}

TEST_CASE("make-data") {
  test::TempDir dir;
  RunConfig c = tiny_config(dir.path());
  c.train_pairs = 8;
  const MakeDataResult r = cmd_make_data(c, dir.path() / "a");
  CHECK(r.train == 8);
  CHECK(count_files(dir.path() / "a" / "train" / "cloud") == 8);
  CHECK(count_files(dir.path() / "a" / "train" / "label") == 8);
  CHECK(count_files(dir.path() / "a" / "test" / "cloud") == 2);

  cmd_make_data(c, dir.path() / "b");
  for (const auto& e : fs::recursive_directory_iterator(dir.path() / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path twin = dir.path() / "b" / fs::relative(e.path(), dir.path() / "a");
    CHECK(file_bytes(e.path()) == file_bytes(twin));
  }
  const auto pairs = datasets::load_pairs(dir.path() / "a", datasets::Split::train);
  REQUIRE(pairs.size() == 8);
  CHECK(pairs[0].clear.shape() == nn::Shape{3, 16, 16});
  CHECK_FALSE(nn::bit_equal(pairs[0].clear, pairs[1].clear));

  c.train_pairs = 0;
  c.test_pairs = 0;
  std::vector<std::string> warnings;
  cmd_make_data(c, dir.path() / "empty", [&](const std::string& w) { warnings.push_back(w); });
  CHECK(warnings.size() == 2);
  CHECK(fs::is_directory(dir.path() / "empty" / "train" / "cloud"));
  CHECK(count_files(dir.path() / "empty" / "train" / "label") == 0);
}

TEST_CASE("phase dependencies") {
  test::TempDir dir;
  const RunConfig c = tiny_config(dir.path());
  cmd_make_data(c, c.data_dir);
  try {
    cmd_train(c, Phase::control);
    FAIL("control trained without prerequisites");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find("pixel") != std::string::npos);
  }
  cmd_train(c, Phase::pixel);
  cmd_train(c, Phase::codec);
  try {
    cmd_train(c, Phase::control);
    FAIL("control trained without a trunk checkpoint");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find("trunk") != std::string::npos);
  }
  fs::remove(checkpoint_path(c, Phase::codec));
  CHECK_THROWS_AS(cmd_train(c, Phase::trunk), DependencyError);
  CHECK_THROWS_AS(load_models(c), DependencyError);
}

TEST_CASE("training logs and phase isolation") {
  test::TempDir dir;
  const RunConfig c = tiny_config(dir.path());
  train_all(c);
  CHECK(fs::exists(fs::path(c.run_dir) / "config.cfg"));

  for (Phase p : {Phase::pixel, Phase::codec, Phase::trunk, Phase::control}) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path(c, p));
    CHECK(ckpt.phase == p);
    const auto log = read_log(log_path(c, p));
    INFO(to_string(p));
    REQUIRE(static_cast<std::int64_t>(log.size()) == ckpt.step);
    for (std::size_t i = 0; i < log.size(); ++i) {
      CHECK(log[i]["step"].get<std::int64_t>() == static_cast<std::int64_t>(i) + 1);
      CHECK(log[i]["phase"] == to_string(p));
      CHECK(std::isfinite(log[i]["loss"].get<double>()));
    }
  }
  CHECK(load_checkpoint(checkpoint_path(c, Phase::pixel)).step == 8);
  CHECK(load_checkpoint(checkpoint_path(c, Phase::control)).step == 6);
  CHECK(load_checkpoint(checkpoint_path(c, Phase::codec)).scalars.at("latent_scale") > 0.0);
  const auto control_log = read_log(log_path(c, Phase::control));
  CHECK(control_log[4]["batch"] == 1);
  CHECK(control_log[4]["k"] == 1);

  // retraining one phase rewrites only its own checkpoint
  for (Phase p : {Phase::pixel, Phase::codec, Phase::trunk, Phase::control}) {
    std::map<Phase, std::string> before;
    for (Phase q : {Phase::pixel, Phase::codec, Phase::trunk, Phase::control}) {
      before[q] = file_bytes(checkpoint_path(c, q));
    }
    RunConfig again = c;
    again.seed = 99;
    cmd_train(again, p, 3);
    for (Phase q : {Phase::pixel, Phase::codec, Phase::trunk, Phase::control}) {
      INFO(to_string(p) << " touched " << to_string(q));
      CHECK((file_bytes(checkpoint_path(c, q)) == before[q]) == (q != p));
    }
  }
}

TEST_CASE("pixel phase on one pair lowers the loss") {
  test::TempDir dir;
  RunConfig c = tiny_config(dir.path());
  c.train_pairs = 1;
  c.pixel_epochs = 1000;
  c.pixel_lr = 1e-3;
  cmd_make_data(c, c.data_dir);
  cmd_train(c, Phase::pixel, 500);
  const auto log = read_log(log_path(c, Phase::pixel));
  REQUIRE(log.size() == 500);
  CHECK(log.back()["loss"].get<double>() < log.front()["loss"].get<double>());
}

TEST_CASE("inference") {
  test::TempDir dir;
  const RunConfig c = tiny_config(dir.path());
  train_all(c);
  const fs::path train_dir = fs::path(c.data_dir) / "train";

  const auto ids = cmd_infer(c, train_dir, dir.path() / "out1", 3, 0);
  CHECK(ids.size() == 4);
  cmd_infer(c, train_dir, dir.path() / "out2", 3, 0);
  for (const auto& id : ids) {
    const Tensor hq = image_io::read_png(dir.path() / "out1" / "hq" / (id + ".png"));
    const Tensor lq = image_io::read_png(dir.path() / "out1" / "lq" / (id + ".png"));
    CHECK(hq.shape() == nn::Shape{3, 16, 16});
    CHECK(lq.shape() == nn::Shape{3, 16, 16});
    CHECK(file_bytes(dir.path() / "out1" / "hq" / (id + ".png")) ==
          file_bytes(dir.path() / "out2" / "hq" / (id + ".png")));
  }

  const Models m = load_models(c);
  const Tensor cloudy = image_io::read_png(train_dir / "cloud" / "0000.png");
  const Restored a = restore_image(cloudy, m, c, 1, c.sample_steps);
  const Restored b = restore_image(cloudy, m, c, 1, c.sample_steps);
  CHECK(nn::bit_equal(a.hq, b.hq));
  CHECK(nn::bit_equal(a.lq, b.lq));
  CHECK_THROWS_AS(restore_image(Tensor({3, 8, 8}), m, c, 1, 8), DataError);

  // the default sampler length is 50; a 64-step chain accepts it
  RunConfig paper_steps = c;
  paper_steps.sample_steps = 50;
  CHECK_NOTHROW(cmd_infer(paper_steps, train_dir / "cloud" / "0001.png", dir.path() / "out3", 3, 0));
  CHECK(fs::exists(dir.path() / "out3" / "hq" / "0001.png"));

  RunConfig wider = c;
  wider.pixel.channels = 16;
  CHECK_THROWS_AS(load_models(wider), VersionError);
}

TEST_CASE("eval") {
  test::TempDir dir;
  nn::Rng rng(8);
  const fs::path pred = dir.path() / "pred", label = dir.path() / "label";
  fs::create_directories(pred);
  fs::create_directories(label);
  CHECK_THROWS_AS(cmd_eval(pred, label), ListingError);

  for (const char* id : {"x", "y"}) {
    const Tensor img = rng.uniform_tensor({3, 16, 16}, 0, 1);
    image_io::write_png(pred / (std::string(id) + ".png"), img);
    image_io::write_png(label / (std::string(id) + ".png"), img);
  }
  const metrics::MetricReport same = cmd_eval(pred, label);
  REQUIRE(same.per_image.size() == 2);
  for (const auto& s : same.per_image) {
    CHECK(s.rmse == 0.0);
    CHECK(s.psnr == 99.0);
    CHECK(std::abs(s.ssim - 1.0) < 1e-12);
  }
  const json report = json::parse(report_json(same));
  CHECK(report["per_image"].size() == 2);
  CHECK(report["per_image"][0]["id"] == "x");
  CHECK(report["mean"]["psnr"] == 99.0);
  CHECK_FALSE(report["mean"].contains("id"));

  fs::remove(pred / "y.png");
  fs::remove(label / "y.png");
  image_io::write_png(pred / "x.png", rng.uniform_tensor({3, 16, 16}, 0, 1));
  const metrics::MetricReport one = cmd_eval(pred, label);
  CHECK(one.mean.psnr == one.per_image[0].psnr);
  CHECK(one.mean.ssim == one.per_image[0].ssim);

  image_io::write_png(pred / "z.png", rng.uniform_tensor({3, 16, 16}, 0, 1));
  CHECK_THROWS_AS(cmd_eval(pred, label), ListingError);
}

TEST_CASE("command line") {
  test::TempDir dir;
  const fs::path cfg = dir.path() / "tiny.cfg";
  save_config(cfg, tiny_config(dir.path()));

  CliResult r = run_cli("make-data --config " + cfg.string(), dir.path());
  CHECK(r.status == 0);
  CHECK(count_files(dir.path() / "data" / "train" / "cloud") == 4);

  r = run_cli("train --config " + cfg.string() + " --phase control", dir.path());
  CHECK(r.status != 0);
  const json err = json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(err["error"] == "dependency");

  r = run_cli("train --config " + cfg.string() + " --phase pixel --steps 2 --seed 4", dir.path());
  CHECK(r.status == 0);
  CHECK(read_log(dir.path() / "run" / "pixel.jsonl").size() == 2);
  CHECK(load_config(dir.path() / "run" / "config.cfg").seed == 4);

  r = run_cli("train --config " + cfg.string() + " --phase nonsense", dir.path());
  CHECK(r.status != 0);
  CHECK(json::parse(r.err.substr(0, r.err.find('\n')))["error"] == "config");

  r = run_cli("eval " + (dir.path() / "data" / "train" / "label").string() + " " +
                  (dir.path() / "data" / "train" / "label").string(),
              dir.path());
  CHECK(r.status == 0);
  const json report = json::parse(file_bytes(dir.path() / "stdout.txt"));
  CHECK(report["mean"]["psnr"] == 99.0);

  r = run_cli("frobnicate", dir.path());
  CHECK(r.status != 0);
  CHECK(json::parse(r.err.substr(0, r.err.find('\n')))["error"] == "usage");
}
