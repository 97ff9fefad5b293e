#include "idfcr/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "idfcr/error.hpp"
#include "idfcr/image_io.hpp"

namespace idfcr::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL) ^ (index * 0xD1B54A32D192ED03ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t { train_data = 1, train_cloud, test_data, test_cloud, phase_base };

std::uint64_t phase_seed(const RunConfig& config, Phase phase) {
  return derive_seed(config.seed, phase_base + static_cast<std::uint64_t>(phase), 0);
}

// Config fields ---------------------------------------------------------------

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return json(v).dump(); }
std::string format_value(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".einf") == std::string::npos) s += ".0";
  return s;
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
  } else {
    T v{};
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec == std::errc() && r.ptr == text.data() + text.size()) return v;
  }
  throw ConfigError("bad value for " + key + ": '" + text + "'");
}

struct Field {
  std::string name;
  std::string aliases;
  std::string type;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T, class Access>
Field field(std::string name, Access access, std::string aliases = {}) {
  Field f;
  f.name = name;
  f.aliases = std::move(aliases);
  if constexpr (std::is_same_v<T, bool>) f.type = "BOOL";
  else if constexpr (std::is_same_v<T, double>) f.type = "FLOAT";
  else if constexpr (std::is_same_v<T, std::string>) f.type = "PATH";
  else f.type = "INT";
  f.get = [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); };
  f.set = [access, name](RunConfig& c, const std::string& text) {
    access(c) = parse_value<T>(name, text);
  };
  return f;
}

#define IDFCR_FIELD(type, key, member) \
  field<type>(key, [](RunConfig& c) -> type& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t{
        IDFCR_FIELD(int, "train_pairs", train_pairs),
        IDFCR_FIELD(int, "test_pairs", test_pairs),
        IDFCR_FIELD(int, "image_size", image_size),
        IDFCR_FIELD(double, "cloud_opacity", cloud.opacity),
        IDFCR_FIELD(double, "cloud_coverage", cloud.coverage),
        IDFCR_FIELD(int, "cloud_octaves", cloud.octaves),
        IDFCR_FIELD(double, "mask_threshold", mask_threshold),
        IDFCR_FIELD(std::string, "data_dir", data_dir),
        IDFCR_FIELD(std::string, "run_dir", run_dir),
        IDFCR_FIELD(int, "pixel_channels", pixel.channels),
        IDFCR_FIELD(int, "pixel_blocks", pixel.num_blocks),
        IDFCR_FIELD(int, "pixel_window", pixel.window_size),
        IDFCR_FIELD(int, "pixel_heads", pixel.heads),
        IDFCR_FIELD(int, "pixel_mlp_ratio", pixel.mlp_ratio),
        IDFCR_FIELD(int, "pixel_swin_depth", pixel.swin_depth),
        IDFCR_FIELD(int, "codec_latent_dim", codec.latent_dim),
        IDFCR_FIELD(int, "codec_codebook_size", codec.codebook_size),
        IDFCR_FIELD(int, "codec_downsample", codec.downsample),
        IDFCR_FIELD(double, "codec_commitment", codec.commitment),
        IDFCR_FIELD(int, "codec_width", codec.width),
        IDFCR_FIELD(int, "unet_base_width", unet.base_width),
        IDFCR_FIELD(int, "unet_groups", unet.groups),
        IDFCR_FIELD(int, "unet_heads", unet.heads),
        IDFCR_FIELD(int, "T", T),
        IDFCR_FIELD(double, "beta_start", beta_start),
        IDFCR_FIELD(double, "beta_end", beta_end),
        IDFCR_FIELD(bool, "rescale_betas", rescale_betas),
        IDFCR_FIELD(int, "pixel_batch", pixel_batch),
        IDFCR_FIELD(int, "pixel_epochs", pixel_epochs),
        IDFCR_FIELD(double, "pixel_lr", pixel_lr),
        IDFCR_FIELD(int, "codec_batch", codec_batch),
        IDFCR_FIELD(int, "codec_steps", codec_steps),
        IDFCR_FIELD(double, "codec_lr", codec_lr),
        IDFCR_FIELD(int, "codec_restart_every", codec_restart_every),
        IDFCR_FIELD(int, "codec_restart_until", codec_restart_until),
        IDFCR_FIELD(int, "trunk_batch", trunk_batch),
        IDFCR_FIELD(int, "trunk_steps", trunk_steps),
        IDFCR_FIELD(double, "trunk_lr", trunk_lr),
        IDFCR_FIELD(int, "diffusion_batch", diffusion_batch),
        IDFCR_FIELD(int, "diffusion_epochs", diffusion_epochs),
        IDFCR_FIELD(double, "diffusion_lr", diffusion_lr),
        IDFCR_FIELD(int, "sample_steps", sample_steps),
    };
    t.push_back(field<int>("inr_k", [](RunConfig& c) -> int& { return c.inr.K; }, "--inr-k"));
    t.push_back(field<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    return t;
  }();
  return table;
}

#undef IDFCR_FIELD

// Settings that must agree across modules follow the run-level value.
void sync(RunConfig& c) {
  c.pixel.image_size = c.image_size;
  c.unet.latent_dim = c.codec.latent_dim;
}

// Checkpoint bytes ------------------------------------------------------------

constexpr char kMagic[8] = {'I', 'D', 'F', 'C', 'R', 'C', 'K', 'P'};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }

  std::vector<std::uint8_t> bytes;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw VersionError("checkpoint is truncated");
  }
  std::uint64_t get(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

// Training helpers ------------------------------------------------------------

// Index batches over a reshuffled permutation each pass.
class Batcher {
 public:
  Batcher(int n, int batch, nn::Rng& rng) : n_(n), batch_(std::min(batch, n)), rng_(rng) {}

  std::vector<int> next() {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch_) {
      if (pos_ == static_cast<int>(order_.size())) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (int i = 0; i < n_; ++i) order_[i] = i;
    for (int i = n_ - 1; i > 0; --i) std::swap(order_[i], order_[rng_.uniform_int(0, i)]);
    pos_ = 0;
  }

  int n_;
  int batch_;
  nn::Rng& rng_;
  std::vector<int> order_;
  int pos_ = 0;
};

std::vector<datasets::ImagePair> training_pairs(const RunConfig& config) {
  auto pairs = datasets::load_pairs(config.data_dir, datasets::Split::train);
  if (pairs.empty()) throw DataError("no training pairs under " + config.data_dir);
  for (const auto& p : pairs) {
    if (p.clear.dim(0) != config.codec.in_channels || p.clear.dim(1) != config.image_size ||
        p.clear.dim(2) != config.image_size) {
      throw DataError("pair " + p.id + " is " + nn::to_string(p.clear.shape()) +
                      ", config expects 3 x " + std::to_string(config.image_size) + " squared");
    }
  }
  return pairs;
}

Checkpoint require_checkpoint(const RunConfig& config, Phase phase, Phase needed_by) {
  const fs::path path = checkpoint_path(config, phase);
  if (!fs::exists(path)) {
    throw DependencyError("phase " + to_string(needed_by) + " needs the " + to_string(phase) +
                          " checkpoint, missing at " + path.string());
  }
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.phase != phase) {
    throw VersionError(path.string() + " holds a " + to_string(ckpt.phase) + " checkpoint");
  }
  return ckpt;
}

Checkpoint new_checkpoint(const RunConfig& config, Phase phase, std::int64_t step,
                          const nn::ParamSet& params) {
  Checkpoint c;
  c.phase = phase;
  c.step = step;
  c.config = config_to_string(config);
  c.tensors = capture(params);
  return c;
}

double latent_std(std::span<const datasets::ImagePair> pairs,
                  const latent_codec::CodecWeights& codec, const RunConfig& config) {
  double s = 0.0, s2 = 0.0, n = 0.0;
  for (const auto& p : pairs) {
    const Tensor z = latent_codec::encode_quantize(p.clear, codec, config.codec).z_d;
    for (double v : z.values()) {
      s += v;
      s2 += v * v;
      n += 1.0;
    }
  }
  const double mean = s / n;
  return std::sqrt(std::max(0.0, s2 / n - mean * mean));
}

Checkpoint train_pixel(const RunConfig& config, std::int64_t max_steps, JsonlLog& log) {
  const auto pairs = training_pairs(config);
  const auto weights = pixel_cr::init_weights(config.pixel, phase_seed(config, Phase::pixel));
  nn::Adam adam(weights.params(), {.lr = config.pixel_lr});
  nn::Rng rng(phase_seed(config, Phase::pixel) + 1);
  const int n = static_cast<int>(pairs.size());
  const int batch = std::min(config.pixel_batch, n);
  const std::int64_t per_epoch = (n + batch - 1) / batch;
  std::int64_t total = per_epoch * config.pixel_epochs;
  if (max_steps > 0) total = std::min(total, max_steps);
  Batcher batches(n, batch, rng);
  for (std::int64_t step = 0; step < total; ++step) {
    std::vector<datasets::ImagePair> b;
    for (int i : batches.next()) b.push_back(pairs[i]);
    const auto r = pixel_cr::train_step(b, weights, config.pixel, adam, config.mask_threshold);
    log.write(json{{"phase", "pixel"}, {"step", step + 1}, {"epoch", step / per_epoch},
                   {"loss", r.total}, {"l_cr", r.l_cr}, {"l_attn", r.l_attn}}
                  .dump());
  }
  return new_checkpoint(config, Phase::pixel, total, weights.params());
}

Checkpoint train_codec(const RunConfig& config, std::int64_t max_steps, JsonlLog& log) {
  const auto pairs = training_pairs(config);
  std::vector<Tensor> images;
  for (const auto& p : pairs) images.push_back(p.clear);
  const auto weights = latent_codec::init_weights(config.codec, phase_seed(config, Phase::codec));
  nn::Adam adam(weights.params(), {.lr = config.codec_lr});
  nn::Rng rng(phase_seed(config, Phase::codec) + 1);
  const std::int64_t total = max_steps > 0 ? std::min<std::int64_t>(max_steps, config.codec_steps)
                                           : config.codec_steps;
  Batcher batches(static_cast<int>(images.size()), config.codec_batch, rng);
  for (std::int64_t step = 0; step < total; ++step) {
    std::vector<Tensor> b;
    for (int i : batches.next()) b.push_back(images[i]);
    const auto r = latent_codec::vq_train_step(b, weights, config.codec, adam);
    json rec{{"phase", "codec"},          {"step", step + 1},
             {"loss", r.recon + r.codebook_loss + config.codec.commitment * r.commitment},
             {"recon", r.recon},          {"codebook", r.codebook_loss},
             {"commitment", r.commitment}};
    if (config.codec_restart_every > 0 && (step + 1) % config.codec_restart_every == 0 &&
        step + 1 <= config.codec_restart_until) {
      rec["restarted"] = latent_codec::restart_dead_codes(images, weights, config.codec, rng);
    }
    log.write(rec.dump());
  }
  Checkpoint ckpt = new_checkpoint(config, Phase::codec, total, weights.params());
  const double sd = latent_std(pairs, weights, config);
  ckpt.scalars["latent_scale"] = sd > 0.0 ? 1.0 / sd : 1.0;
  return ckpt;
}

latent_codec::CodecWeights load_codec(const RunConfig& config, const Checkpoint& ckpt) {
  auto w = latent_codec::init_weights(config.codec, phase_seed(config, Phase::codec));
  restore(ckpt, w.params());
  return w;
}

pixel_cr::PixelCRWeights load_pixel(const RunConfig& config, const Checkpoint& ckpt) {
  auto w = pixel_cr::init_weights(config.pixel, phase_seed(config, Phase::pixel));
  restore(ckpt, w.params());
  return w;
}

double scale_of(const Checkpoint& codec) {
  const auto it = codec.scalars.find("latent_scale");
  if (it == codec.scalars.end()) throw VersionError("codec checkpoint has no latent_scale");
  return it->second;
}

Checkpoint train_trunk(const RunConfig& config, std::int64_t max_steps, JsonlLog& log) {
  const Checkpoint codec_ckpt = require_checkpoint(config, Phase::codec, Phase::trunk);
  const auto codec = load_codec(config, codec_ckpt);
  const double scale = scale_of(codec_ckpt);
  std::vector<Tensor> latents;
  for (const auto& p : training_pairs(config)) {
    latents.push_back(latent_codec::encode_quantize(p.clear, codec, config.codec).z_d * scale);
  }
  const auto denoiser = diffusion::init_denoiser(config.unet, phase_seed(config, Phase::trunk));
  nn::Rng rng(phase_seed(config, Phase::trunk) + 1);
  diffusion::PretrainOptions options;
  options.steps = max_steps > 0 ? static_cast<int>(std::min<std::int64_t>(max_steps, config.trunk_steps))
                                : config.trunk_steps;
  options.batch_size = config.trunk_batch;
  options.lr = config.trunk_lr;
  diffusion::pretrain_trunk(latents, denoiser, config.schedule(), config.unet, options, rng,
                            [&](std::int64_t step, double loss) {
                              log.write(json{{"phase", "trunk"}, {"step", step + 1}, {"loss", loss}}.dump());
                            });
  return new_checkpoint(config, Phase::trunk, options.steps, denoiser.trunk_params());
}

// Trunk restored and frozen, control encoder cloned from it.
diffusion::DenoiserWeights control_start(const RunConfig& config, const Checkpoint& trunk) {
  auto denoiser = diffusion::init_denoiser(config.unet, phase_seed(config, Phase::trunk));
  restore(trunk, denoiser.trunk_params());
  denoiser.clone_encoder_into_control();
  denoiser.freeze_trunk();
  denoiser.control_params().set_requires_grad(true);
  return denoiser;
}

Checkpoint train_control(const RunConfig& config, std::int64_t max_steps, JsonlLog& log) {
  const Checkpoint pixel_ckpt = require_checkpoint(config, Phase::pixel, Phase::control);
  const Checkpoint codec_ckpt = require_checkpoint(config, Phase::codec, Phase::control);
  const Checkpoint trunk_ckpt = require_checkpoint(config, Phase::trunk, Phase::control);
  const auto pixel = load_pixel(config, pixel_ckpt);
  const auto codec = load_codec(config, codec_ckpt);
  const inr::LatentPipeline pipeline{&pixel, config.pixel, &codec, config.codec,
                                     scale_of(codec_ckpt)};
  const auto pairs = training_pairs(config);
  const auto samples = inr::to_latents(pairs, pipeline);

  const auto denoiser = control_start(config, trunk_ckpt);
  nn::Adam adam(denoiser.control_params(), {.lr = config.diffusion_lr});
  nn::Rng rng(phase_seed(config, Phase::control));
  const auto schedule = config.schedule();
  const int batch = std::min<int>(config.diffusion_batch, static_cast<int>(samples.size()));
  const std::int64_t per_epoch =
      static_cast<std::int64_t>((samples.size() + batch - 1) / batch) * config.inr.K;
  int epochs = config.diffusion_epochs;
  if (max_steps > 0) {
    epochs = static_cast<int>(std::min<std::int64_t>(epochs, (max_steps + per_epoch - 1) / per_epoch));
  }
  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    inr::inr_epoch(std::span<const diffusion::LatentSample>(samples), epoch, batch, denoiser,
                   schedule, config.unet, config.inr, adam, rng,
                   [&](int e, int b, int k, double loss) {
                     log.write(json{{"phase", "control"}, {"step", ++step}, {"epoch", e},
                                    {"batch", b}, {"k", k}, {"loss", loss}}
                                   .dump());
                   });
  }
  return new_checkpoint(config, Phase::control, step, denoiser.control_params());
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ListingError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::pixel: return "pixel";
    case Phase::codec: return "codec";
    case Phase::trunk: return "trunk";
    case Phase::control: return "control";
  }
  return "unknown";
}

Phase parse_phase(const std::string& text) {
  for (Phase p : {Phase::pixel, Phase::codec, Phase::trunk, Phase::control}) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError("unknown phase '" + text + "' (expected pixel, codec, trunk or control)");
}

std::vector<Phase> prerequisites(Phase phase) {
  switch (phase) {
    case Phase::trunk: return {Phase::codec};
    case Phase::control: return {Phase::pixel, Phase::codec, Phase::trunk};
    default: return {};
  }
}

void RunConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be positive");
  };
  if (train_pairs < 0 || test_pairs < 0) throw ConfigError("pair counts must be non-negative");
  positive(image_size, "image_size");
  positive(pixel_batch, "pixel_batch");
  positive(pixel_epochs, "pixel_epochs");
  positive(codec_batch, "codec_batch");
  positive(codec_steps, "codec_steps");
  positive(trunk_batch, "trunk_batch");
  positive(trunk_steps, "trunk_steps");
  positive(diffusion_batch, "diffusion_batch");
  positive(diffusion_epochs, "diffusion_epochs");
  positive(sample_steps, "sample_steps");
  if (codec_restart_every < 0) throw ConfigError("codec_restart_every must be non-negative");
  for (double lr : {pixel_lr, codec_lr, trunk_lr, diffusion_lr}) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be finite and >= 0");
  }
  if (mask_threshold < 0.0 || mask_threshold > 1.0) throw ConfigError("mask_threshold must be in [0,1]");
  if (data_dir.empty() || run_dir.empty()) throw ConfigError("data_dir and run_dir must be set");
  if (pixel.image_size != image_size) throw ConfigError("pixel image size differs from image_size");
  if (unet.latent_dim != codec.latent_dim) throw ConfigError("unet latent_dim differs from codec latent_dim");
  datasets::validate(cloud);
  pixel.validate();
  codec.validate();
  unet.validate();
  inr.validate();
  if (image_size % codec.downsample != 0 || (image_size / codec.downsample) % 2 != 0) {
    throw ConfigError("image_size / codec_downsample must be even");
  }
  if (sample_steps > T) throw ConfigError("sample_steps exceeds T");
  (void)schedule();
}

diffusion::NoiseSchedule RunConfig::schedule() const {
  return rescale_betas ? diffusion::scaled_schedule(T, beta_start, beta_end)
                       : diffusion::make_schedule(T, beta_start, beta_end);
}

void bind_config(CLI::App& app, RunConfig& config) {
  for (const Field& f : fields()) {
    std::string names = "--" + f.name;
    if (!f.aliases.empty()) names += "," + f.aliases;
    app.add_option_function<std::string>(
           names, [&config, set = f.set](const std::string& v) {
             set(config, v);
             sync(config);
           })
        ->type_name(f.type)
        ->default_str(f.get(config))
        ->group("Run config");
  }
}

std::string config_to_string(const RunConfig& config) {
  std::string out;
  for (const Field& f : fields()) out += f.name + " = " + f.get(config) + "\n";
  return out;
}

RunConfig config_from_string(const std::string& text) {
  RunConfig config;
  CLI::App app;
  bind_config(app, config);
  app.allow_config_extras(CLI::config_extras_mode::error);
  std::istringstream in(text);
  try {
    app.parse_from_stream(in);
  } catch (const CLI::ParseError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  sync(config);
  return config;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str());
}

void save_config(const fs::path& path, const RunConfig& config) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << config_to_string(config);
  if (!out) throw IoError("cannot write config " + path.string());
}

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.phase));
  w.u64(static_cast<std::uint64_t>(c.step));
  w.str(c.config);
  w.u32(static_cast<std::uint32_t>(c.scalars.size()));
  for (const auto& [name, v] : c.scalars) {
    w.str(name);
    w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.f64(v);
  }
  return std::move(w.bytes);
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw VersionError("not an idfcr checkpoint");
  }
  const std::vector<std::uint8_t> body(bytes.begin() + sizeof kMagic, bytes.end());
  Reader r(body);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  const std::uint32_t phase = r.u32();
  if (phase > static_cast<std::uint32_t>(Phase::control)) throw VersionError("bad checkpoint phase tag");
  c.phase = static_cast<Phase>(phase);
  c.step = static_cast<std::int64_t>(r.u64());
  c.config = r.str();
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    std::string name = r.str();
    c.scalars[name] = r.f64();
  }
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    std::string name = r.str();
    nn::Shape shape(r.u32());
    for (int& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    for (double& v : t.values()) v = r.f64();
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw VersionError("trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto bytes = serialize(checkpoint);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

void restore(const Checkpoint& checkpoint, const nn::ParamSet& params) {
  for (const auto& [name, var] : params.entries()) {
    const auto it = checkpoint.tensors.find(name);
    if (it == checkpoint.tensors.end()) {
      throw VersionError(to_string(checkpoint.phase) + " checkpoint lacks " + name);
    }
    if (it->second.shape() != var.shape()) {
      throw VersionError(to_string(checkpoint.phase) + " checkpoint " + name + " is " +
                         nn::to_string(it->second.shape()) + ", config expects " +
                         nn::to_string(var.shape()));
    }
  }
  if (checkpoint.tensors.size() != params.size()) {
    throw VersionError(to_string(checkpoint.phase) + " checkpoint has " +
                       std::to_string(checkpoint.tensors.size()) + " tensors, config expects " +
                       std::to_string(params.size()));
  }
  for (const auto& [name, var] : params.entries()) var.node()->value = checkpoint.tensors.at(name);
}

std::map<std::string, Tensor> capture(const nn::ParamSet& params) { return params.snapshot(); }

fs::path checkpoint_path(const RunConfig& config, Phase phase) {
  return fs::path(config.run_dir) / (to_string(phase) + ".ckpt");
}

fs::path log_path(const RunConfig& config, Phase phase) {
  return fs::path(config.run_dir) / (to_string(phase) + ".jsonl");
}

JsonlLog::JsonlLog(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot open log " + path.string());
}

void JsonlLog::write(const std::string& json_line) { out_ << json_line << '\n' << std::flush; }

MakeDataResult cmd_make_data(const RunConfig& config, const fs::path& out, const Warn& warn) {
  config.validate();
  MakeDataResult result{config.train_pairs, config.test_pairs};
  const int c = config.codec.in_channels, s = config.image_size;
  const auto write_split = [&](const std::string& split, int n, Stream data, Stream cloud) {
    const fs::path dir = out / split;
    fs::create_directories(dir / "cloud");
    fs::create_directories(dir / "label");
    for (int i = 0; i < n; ++i) {
      const Tensor clear = datasets::make_terrain(c, s, s, derive_seed(config.seed, data, i));
      datasets::CloudParams params = config.cloud;
      params.seed = derive_seed(config.seed, cloud, i);
      char id[16];
      std::snprintf(id, sizeof id, "%04d", i);
      datasets::write_pair(dir, datasets::synthesize_pair(clear, params, id));
    }
    if (n == 0 && warn) warn("no " + split + " pairs requested; wrote empty " + dir.string());
  };
  write_split("train", config.train_pairs, train_data, train_cloud);
  write_split("test", config.test_pairs, test_data, test_cloud);
  return result;
}

Checkpoint cmd_train(const RunConfig& config, Phase phase, std::int64_t max_steps) {
  config.validate();
  for (Phase p : prerequisites(phase)) require_checkpoint(config, p, phase);
  save_config(fs::path(config.run_dir) / "config.cfg", config);
  JsonlLog log(log_path(config, phase));
  Checkpoint ckpt;
  switch (phase) {
    case Phase::pixel: ckpt = train_pixel(config, max_steps, log); break;
    case Phase::codec: ckpt = train_codec(config, max_steps, log); break;
    case Phase::trunk: ckpt = train_trunk(config, max_steps, log); break;
    case Phase::control: ckpt = train_control(config, max_steps, log); break;
  }
  save_checkpoint(checkpoint_path(config, phase), ckpt);
  return ckpt;
}

Models load_models(const RunConfig& config) {
  config.validate();
  const Checkpoint pixel = require_checkpoint(config, Phase::pixel, Phase::control);
  const Checkpoint codec = require_checkpoint(config, Phase::codec, Phase::control);
  const Checkpoint trunk = require_checkpoint(config, Phase::trunk, Phase::control);
  const fs::path control_path = checkpoint_path(config, Phase::control);
  if (!fs::exists(control_path)) {
    throw DependencyError("inference needs the control checkpoint, missing at " + control_path.string());
  }
  const Checkpoint control = load_checkpoint(control_path);
  if (control.phase != Phase::control) throw VersionError(control_path.string() + " is not a control checkpoint");
  Models m{load_pixel(config, pixel), load_codec(config, codec),
           diffusion::init_denoiser(config.unet, phase_seed(config, Phase::trunk)), scale_of(codec)};
  restore(trunk, m.denoiser.trunk_params());
  restore(control, m.denoiser.control_params());
  m.denoiser.params().set_requires_grad(false);
  for (double v : m.codec.codebook.entries.value().values()) {
    m.latent_clip = std::max(m.latent_clip, std::abs(v) * m.latent_scale);
  }
  return m;
}

Restored restore_image(const Tensor& cloudy, const Models& models, const RunConfig& config,
                       std::uint64_t seed, int steps) {
  if (cloudy.rank() != 3 || cloudy.dim(0) != config.codec.in_channels ||
      cloudy.dim(1) != config.image_size || cloudy.dim(2) != config.image_size) {
    throw DataError("input is " + nn::to_string(cloudy.shape()) + ", config expects 3 x " +
                    std::to_string(config.image_size) + " squared");
  }
  nn::NoGradGuard guard;
  Restored out;
  out.lq = pixel_cr::infer(cloudy, models.pixel, config.pixel);
  const Tensor cond =
      latent_codec::encode_quantize(out.lq, models.codec, config.codec).z_d * models.latent_scale;
  nn::Rng rng(seed);
  const Tensor z0 = diffusion::ddpm_sample(cond.shape(), &cond, models.denoiser, config.schedule(),
                                           config.unet, rng, steps, models.latent_clip);
  const auto q = latent_codec::quantize(z0 * (1.0 / models.latent_scale), models.codec.codebook);
  out.hq = latent_codec::decode_image(q.z_d, models.codec, config.codec);
  return out;
}

std::vector<std::string> cmd_infer(const RunConfig& config, const fs::path& input,
                                   const fs::path& out, std::uint64_t seed, int steps) {
  const Models models = load_models(config);
  if (steps <= 0) steps = config.sample_steps;
  std::vector<fs::path> files;
  if (fs::is_regular_file(input)) {
    files.push_back(input);
  } else if (fs::is_directory(input / "cloud")) {
    files = list_pngs(input / "cloud");
  } else {
    files = list_pngs(input);
  }
  if (files.empty()) throw ListingError("no PNG images under " + input.string());
  fs::create_directories(out / "lq");
  fs::create_directories(out / "hq");
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string id = files[i].stem().string();
    const Restored r =
        restore_image(image_io::read_png(files[i]), models, config, derive_seed(seed, 0, i), steps);
    image_io::write_png(out / "lq" / (id + ".png"), r.lq);
    image_io::write_png(out / "hq" / (id + ".png"), r.hq);
    ids.push_back(id);
  }
  return ids;
}

metrics::MetricReport cmd_eval(const fs::path& pred_dir, const fs::path& label_dir) {
  const auto preds = list_pngs(pred_dir);
  const auto labels = list_pngs(label_dir);
  if (preds.empty() && labels.empty()) {
    throw ListingError("no images in " + pred_dir.string() + " or " + label_dir.string());
  }
  std::set<std::string> pred_names, label_names;
  for (const auto& p : preds) pred_names.insert(p.filename().string());
  for (const auto& p : labels) label_names.insert(p.filename().string());
  std::vector<std::string> unmatched;
  std::set_symmetric_difference(pred_names.begin(), pred_names.end(), label_names.begin(),
                                label_names.end(), std::back_inserter(unmatched));
  if (!unmatched.empty()) {
    std::string list;
    for (const auto& u : unmatched) list += (list.empty() ? "" : ", ") + u;
    throw ListingError("unmatched files: " + list);
  }
  std::vector<metrics::ImageScore> scores;
  for (const auto& p : preds) {
    scores.push_back(metrics::score(image_io::read_png(p),
                                    image_io::read_png(label_dir / p.filename()),
                                    p.stem().string()));
  }
  return metrics::summarize(std::move(scores));
}

std::string report_json(const metrics::MetricReport& report) {
  const auto entry = [](const metrics::ImageScore& s) {
    return json{{"id", s.id}, {"psnr", s.psnr}, {"ssim", s.ssim}, {"rmse", s.rmse}};
  };
  json per = json::array();
  for (const auto& s : report.per_image) per.push_back(entry(s));
  json mean = entry(report.mean);
  mean.erase("id");
  return json{{"per_image", per}, {"mean", mean}}.dump(2);
}

}  // namespace idfcr::harness
