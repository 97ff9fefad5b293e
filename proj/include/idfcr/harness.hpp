#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "idfcr/datasets.hpp"
#include "idfcr/diffusion.hpp"
#include "idfcr/inr.hpp"
#include "idfcr/latent_codec.hpp"
#include "idfcr/metrics.hpp"
#include "idfcr/pixel_cr.hpp"

namespace CLI {
class App;
}

// Configuration, checkpoints, logs, and the make-data / train / infer / eval
// commands tying the pipeline together.
namespace idfcr::harness {

enum class Phase { pixel, codec, trunk, control };
std::string to_string(Phase phase);
Phase parse_phase(const std::string& text);
// Phases whose checkpoints must exist before `phase` can train.
std::vector<Phase> prerequisites(Phase phase);

struct RunConfig {
  // data
  int train_pairs = 16;
  int test_pairs = 4;
  int image_size = 64;
  datasets::CloudParams cloud;
  double mask_threshold = datasets::kDefaultMaskThreshold;
  std::string data_dir = "data";
  std::string run_dir = "run";

  pixel_cr::PixelCRConfig pixel;
  latent_codec::CodecConfig codec;
  diffusion::UNetConfig unet;
  inr::INRConfig inr;

  // linear noise schedule; with rescale_betas the betas are read as a
  // 1000-step chain and stretched to T
  int T = 64;
  double beta_start = 0.0015625;
  double beta_end = 0.1;
  bool rescale_betas = false;

  // optimization
  int pixel_batch = 1;
  int pixel_epochs = 200;
  double pixel_lr = 4e-4;
  int codec_batch = 4;
  int codec_steps = 1500;
  double codec_lr = 2e-3;
  int codec_restart_every = 25;
  int codec_restart_until = 600;
  int trunk_batch = 2;
  int trunk_steps = 2000;
  double trunk_lr = 1e-3;
  int diffusion_batch = 2;
  int diffusion_epochs = 100;
  double diffusion_lr = 1e-4;
  int sample_steps = 50;

  std::uint64_t seed = 0;

  void validate() const;
  diffusion::NoiseSchedule schedule() const;
};

// Registers every RunConfig field as a `--key` option that may also appear as
// `key = value` in a config file.
void bind_config(CLI::App& app, RunConfig& config);

std::string config_to_string(const RunConfig& config);
RunConfig config_from_string(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Phase phase = Phase::pixel;
  std::int64_t step = 0;
  std::string config;  // config_to_string snapshot
  std::map<std::string, nn::Tensor> tensors;
  std::map<std::string, double> scalars;
};

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into `params`; a missing name or a shape mismatch
// raises VersionError.
void restore(const Checkpoint& checkpoint, const nn::ParamSet& params);
std::map<std::string, nn::Tensor> capture(const nn::ParamSet& params);

std::filesystem::path checkpoint_path(const RunConfig& config, Phase phase);
std::filesystem::path log_path(const RunConfig& config, Phase phase);

// One JSON object per line; the file is truncated on open.
class JsonlLog {
 public:
  explicit JsonlLog(const std::filesystem::path& path);
  void write(const std::string& json_line);

 private:
  std::ofstream out_;
};

using Warn = std::function<void(const std::string&)>;

struct MakeDataResult {
  int train = 0;
  int test = 0;
};

// Writes <out>/train and <out>/test pair directories.
MakeDataResult cmd_make_data(const RunConfig& config, const std::filesystem::path& out,
                             const Warn& warn = nullptr);

// `max_steps` > 0 caps the optimizer steps; the control phase rounds up to
// whole epochs.
Checkpoint cmd_train(const RunConfig& config, Phase phase, std::int64_t max_steps = 0);

// Loaded weights for all four phases.
struct Models {
  pixel_cr::PixelCRWeights pixel;
  latent_codec::CodecWeights codec;
  diffusion::DenoiserWeights denoiser;
  double latent_scale = 1.0;
  double latent_clip = 0.0;  // largest scaled codebook magnitude
};

Models load_models(const RunConfig& config);

struct Restored {
  nn::Tensor lq;
  nn::Tensor hq;
};

Restored restore_image(const nn::Tensor& cloudy, const Models& models, const RunConfig& config,
                       std::uint64_t seed, int steps);

// `input` is a PNG, a directory of PNGs, or a pair directory (its cloud/ is
// used). Writes <out>/lq/<id>.png and <out>/hq/<id>.png; returns the ids.
std::vector<std::string> cmd_infer(const RunConfig& config, const std::filesystem::path& input,
                                   const std::filesystem::path& out, std::uint64_t seed,
                                   int steps);

metrics::MetricReport cmd_eval(const std::filesystem::path& pred_dir,
                               const std::filesystem::path& label_dir);
std::string report_json(const metrics::MetricReport& report);

}  // namespace idfcr::harness
