#include "uidkat/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "uidkat/checkpoint.hpp"

namespace uidkat {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ShapeError("config: '" + std::string(key) + "' expects a nonnegative integer, got '" +
                     std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(out)) {
    throw ShapeError("config: '" + std::string(key) + "' expects a number, got '" + s + "'");
  }
  return out;
}

bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ShapeError("config: '" + std::string(key) + "' expects true/false, got '" + std::string(v) +
                   "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ShapeError("config: epochs must be positive");
  if (decay_start_epoch >= epochs) {
    throw ShapeError("config: decay_start_epoch (" + std::to_string(decay_start_epoch) +
                     ") must be < epochs (" + std::to_string(epochs) + ")");
  }
  if (image_size == 0 || image_size % 16 != 0) {
    throw ShapeError("config: image_size must be a positive multiple of 16");
  }
  if (image_size < kMinDiscriminatorInput) throw ShapeError("config: image_size too small");
  if (batch_size == 0) throw ShapeError("config: batch_size must be positive");
  if (!(lr > 0)) throw ShapeError("config: lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
    throw ShapeError("config: Adam betas must lie in [0, 1)");
  }
  weights.validate();
  nce_options().validate();
  generator_config().validate();
}

GeneratorConfig TrainConfig::generator_config() const {
  GeneratorConfig g = variant_config(variant);
  g.block.token_mixer = parse_mixer(token_mixer);
  g.block.channel_mixer = parse_mixer(channel_mixer);
  g.block.grkan_stack = grkan_stack;
  g.block.patch_size = patch_size;
  g.encoder_activation = parse_activation(encoder_activation);
  g.skip_mode = parse_skip_mode(skip_mode);
  return g;
}

PatchNCEOptions TrainConfig::nce_options() const {
  PatchNCEOptions o;
  o.locations = nce_locations;
  o.tau = tau;
  o.detach_keys = detach_keys;
  return o;
}

void TrainConfig::set(std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  if (key == "variant") {
    if (v.size() != 1) throw ShapeError("config: variant must be T, S or B");
    variant = static_cast<char>(std::toupper(static_cast<unsigned char>(v[0])));
  } else if (key == "epochs") {
    epochs = parse_uint(key, v);
  } else if (key == "decay_start_epoch") {
    decay_start_epoch = parse_uint(key, v);
  } else if (key == "lr") {
    lr = parse_real(key, v);
  } else if (key == "beta1") {
    beta1 = parse_real(key, v);
  } else if (key == "beta2") {
    beta2 = parse_real(key, v);
  } else if (key == "batch_size") {
    batch_size = parse_uint(key, v);
  } else if (key == "image_size") {
    image_size = parse_uint(key, v);
  } else if (key == "lambda_adv") {
    weights.adv = parse_real(key, v);
  } else if (key == "lambda_ide") {
    weights.ide = parse_real(key, v);
  } else if (key == "lambda_nce") {
    weights.nce = parse_real(key, v);
  } else if (key == "tau") {
    tau = parse_real(key, v);
  } else if (key == "nce_locations") {
    nce_locations = parse_uint(key, v);
  } else if (key == "detach_keys") {
    detach_keys = parse_flag(key, v);
  } else if (key == "seed") {
    seed = parse_uint(key, v);
  } else if (key == "hazy_dir") {
    hazy_dir = v;
  } else if (key == "clean_dir") {
    clean_dir = v;
  } else if (key == "out_dir") {
    out_dir = v;
  } else if (key == "checkpoint_every") {
    checkpoint_every = parse_uint(key, v);
  } else if (key == "max_steps") {
    max_steps = parse_uint(key, v);
  } else if (key == "flip") {
    flip = parse_flag(key, v);
  } else if (key == "token_mixer") {
    token_mixer = v;
  } else if (key == "channel_mixer") {
    channel_mixer = v;
  } else if (key == "grkan_stack") {
    grkan_stack = parse_uint(key, v);
  } else if (key == "patch_size") {
    patch_size = parse_uint(key, v);
  } else if (key == "encoder_activation") {
    encoder_activation = v;
  } else if (key == "skip_mode") {
    skip_mode = v;
  } else {
    throw ShapeError("config: unknown key '" + std::string(key) + "'");
  }
}

void apply_config_text(TrainConfig& cfg, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ShapeError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    cfg.set(trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
  }
}

TrainConfig load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

json to_json(const TrainConfig& c) {
  return {{"variant", std::string(1, c.variant)},
          {"epochs", c.epochs},
          {"decay_start_epoch", c.decay_start_epoch},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"batch_size", c.batch_size},
          {"image_size", c.image_size},
          {"lambda_adv", c.weights.adv},
          {"lambda_ide", c.weights.ide},
          {"lambda_nce", c.weights.nce},
          {"tau", c.tau},
          {"nce_locations", c.nce_locations},
          {"detach_keys", c.detach_keys},
          {"seed", c.seed},
          {"hazy_dir", c.hazy_dir},
          {"clean_dir", c.clean_dir},
          {"out_dir", c.out_dir},
          {"checkpoint_every", c.checkpoint_every},
          {"max_steps", c.max_steps},
          {"flip", c.flip},
          {"token_mixer", c.token_mixer},
          {"channel_mixer", c.channel_mixer},
          {"grkan_stack", c.grkan_stack},
          {"patch_size", c.patch_size},
          {"encoder_activation", c.encoder_activation},
          {"skip_mode", c.skip_mode}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.variant = j.at("variant").get<std::string>().at(0);
    c.epochs = j.at("epochs").get<std::size_t>();
    c.decay_start_epoch = j.at("decay_start_epoch").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.weights.adv = j.at("lambda_adv").get<double>();
    c.weights.ide = j.at("lambda_ide").get<double>();
    c.weights.nce = j.at("lambda_nce").get<double>();
    c.tau = j.at("tau").get<double>();
    c.nce_locations = j.at("nce_locations").get<std::size_t>();
    c.detach_keys = j.at("detach_keys").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.hazy_dir = j.at("hazy_dir").get<std::string>();
    c.clean_dir = j.at("clean_dir").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
    c.max_steps = j.at("max_steps").get<std::size_t>();
    c.flip = j.at("flip").get<bool>();
    c.token_mixer = j.at("token_mixer").get<std::string>();
    c.channel_mixer = j.at("channel_mixer").get<std::string>();
    c.grkan_stack = j.at("grkan_stack").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.encoder_activation = j.at("encoder_activation").get<std::string>();
    c.skip_mode = j.at("skip_mode").get<std::string>();
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kCorruptManifest,
                          std::string("malformed training config: ") + e.what());
  }
  return c;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch > cfg.epochs) {
    throw ShapeError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(cfg.epochs) + "]");
  }
  if (cfg.decay_start_epoch >= cfg.epochs) throw ShapeError("lr_at: decay_start_epoch >= epochs");
  if (epoch < cfg.decay_start_epoch) return cfg.lr;
  return cfg.lr * static_cast<double>(cfg.epochs - epoch) /
         static_cast<double>(cfg.epochs - cfg.decay_start_epoch);
}

std::string format_log_row(const StepLog& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                static_cast<unsigned long long>(l.step), l.epoch, l.lr, l.adv_g, l.ide, l.pc,
                l.total_g, l.adv_d);
  return buf;
}

// ---------------------------------------------------------------- state

TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  s.rng = Rng(cfg.seed);
  Rng init = s.rng.stream("init");
  s.model = build_model<float>(cfg.generator_config(), init);
  const AdamHyper hyper{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  s.opt_g = AdamState<float>::for_params(s.model.generator_side_params(), hyper);
  s.opt_d = AdamState<float>::for_params(s.model.disc.params(), hyper);
  return s;
}

namespace {

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json tensor_summary(const Tensor<float>& t) {
  if (t.empty()) return nullptr;
  double lo = INFINITY, hi = -INFINITY, sum = 0;
  std::size_t bad = 0;
  for (float v : t.vec()) {
    if (!std::isfinite(v)) {
      ++bad;
      continue;
    }
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
    sum += v;
  }
  return {{"shape", t.shape()},
          {"non_finite", bad},
          {"min", real_str(lo)},
          {"max", real_str(hi)},
          {"mean", real_str(sum / std::max<std::size_t>(1, t.numel() - bad))}};
}

[[noreturn]] void abort_step(const TrainState& s, const StepLog& log, const Tensor<float>& x,
                             const Tensor<float>& y, const Tensor<float>& fake,
                             const std::string& reason) {
  const json dump = {{"step", log.step},
                     {"reason", reason},
                     {"epoch", log.epoch},
                     {"lr", real_str(log.lr)},
                     {"adv_g", real_str(log.adv_g)},
                     {"ide", real_str(log.ide)},
                     {"pc", real_str(log.pc)},
                     {"adv_d", real_str(log.adv_d)},
                     {"x", tensor_summary(x)},
                     {"y", tensor_summary(y)},
                     {"fake", tensor_summary(fake)}};
  std::string where;
  if (!s.cfg.out_dir.empty()) {
    const fs::path p = fs::path(s.cfg.out_dir) / ("nan_dump_step" + std::to_string(log.step) + ".json");
    fs::create_directories(p.parent_path());
    std::ofstream(p) << dump.dump(2) << '\n';
    where = "; diagnostics in " + p.string();
  }
  throw NumericError(reason + " at step " + std::to_string(log.step) + where);
}

}  // namespace

namespace {

// Losses not reached before a failure stay NaN in `log`; `fake` is empty until G(x) exists.
void step_impl(TrainState& s, const Tensor<float>& x, const Tensor<float>& y, StepLog& log,
               Tensor<float>& fake) {
  const TrainConfig& cfg = s.cfg;
  auto& m = s.model;
  s.opt_g.hyper.lr = s.opt_d.hyper.lr = log.lr;

  const ParamRefs<float> gp = m.generator_side_params();
  const ParamRefs<float> dp = m.disc.params();
  zero_grads(gp);
  zero_grads(dp);

  // Forward passes: G(x) with its stack, the re-encoded G(x), G(y), D(G(x)).
  FeatureStack<float> in_stack, out_stack, idt_stack;
  GeneratorCache<float> fake_cache, idt_cache;
  EncodeCache<float> reenc_cache;
  fake = m.gen.forward(x, &in_stack, &fake_cache);
  m.gen.encode(fake, out_stack, &reenc_cache);
  const Tensor<float> idt = m.gen.forward(y, &idt_stack, &idt_cache);
  DiscriminatorCache<float> dfake_cache;
  const Tensor<float> logits_fake = m.disc.forward(fake, &dfake_cache);

  Tensor<float> dlogits, didt;
  log.adv_g = lsgan_generator_loss(logits_fake, &dlogits);
  log.ide = identity_loss(idt, y, &didt);
  const PatchNCEOptions nce = cfg.nce_options();
  Rng patch_rng = s.rng.stream("patch", s.step);
  PatchNCEGrads<float> ng;
  ng.scale = cfg.weights.nce;
  log.pc = patch_nce_loss(in_stack, out_stack, m.heads, nce, patch_rng, &ng);
  log.total_g = total_generator_loss(log.adv_g, log.ide, log.pc, cfg.weights);

  // Discriminator loss on the detached G(x); D is unchanged until its own update.
  DiscriminatorCache<float> dreal_cache;
  const Tensor<float> logits_real = m.disc.forward(y, &dreal_cache);
  Tensor<float> dreal, dfake_d;
  log.adv_d = lsgan_discriminator_loss(logits_real, logits_fake, &dreal, &dfake_d);

  if (!std::isfinite(log.adv_g) || !std::isfinite(log.ide) || !std::isfinite(log.pc) ||
      !std::isfinite(log.adv_d) || !std::isfinite(log.total_g)) {
    throw NumericError("non-finite loss (adv_g " + real_str(log.adv_g) + ", ide " +
                       real_str(log.ide) + ", pc " + real_str(log.pc) + ", adv_d " +
                       real_str(log.adv_d) + ")");
  }

  // Generator update. Adversarial gradients pass through D without touching its grads.
  dlogits *= static_cast<float>(cfg.weights.adv);
  Tensor<float> dfake = m.disc.backward(dfake_cache, dlogits, false);
  dfake += m.gen.encode_backward(reenc_cache, Tensor<float>::zeros_like(out_stack.layers[4]), {}, {},
                                 &ng.output);
  m.gen.backward(fake_cache, dfake, nce.detach_keys ? nullptr : &ng.input);
  didt *= static_cast<float>(cfg.weights.ide);
  m.gen.backward(idt_cache, didt);

  adam_step(gp, s.opt_g);
  m.disc.backward(dreal_cache, dreal, true);
  m.disc.backward(dfake_cache, dfake_d, true);
  adam_step(dp, s.opt_d);
}

}  // namespace

StepLog train_step(TrainState& s, const Tensor<float>& x, const Tensor<float>& y) {
  check_generator_input(x.shape());
  expect_shape(y.shape(), x.shape(), "train_step clean batch");
  StepLog log;
  log.step = s.step;
  log.epoch = s.epoch;
  log.lr = lr_at(s.epoch, s.cfg);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  log.adv_g = log.ide = log.pc = log.total_g = log.adv_d = nan;
  Tensor<float> fake;
  try {
    step_impl(s, x, y, log, fake);
  } catch (const NumericError& e) {
    abort_step(s, log, x, y, fake, e.what());
  }
  ++s.step;
  return log;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr const char* kStateDir = "train_state";

TensorRefs aux_tensors(TrainState& s) {
  TensorRefs out = param_values(s.model.disc.params());
  for (auto& h : s.model.heads) {
    ParamRefs<float> hp;
    h.collect(hp);
    for (auto& t : param_values(hp)) out.push_back(t);
  }
  const auto moments = [&out](const ParamRefs<float>& params, AdamState<float>& opt,
                              const std::string& tag) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.emplace_back("optim." + tag + ".m." + params[i]->name, &opt.m[i]);
      out.emplace_back("optim." + tag + ".v." + params[i]->name, &opt.v[i]);
    }
  };
  moments(s.model.generator_side_params(), s.opt_g, "g");
  moments(s.model.disc.params(), s.opt_d, "d");
  return out;
}

}  // namespace

void save_train_state(TrainState& s, const fs::path& dir) {
  save_generator(dir, s.model.gen);
  save_tensors(dir / kStateDir, aux_tensors(s));
  const json state = {{"step", s.step},
                      {"epoch", s.epoch},
                      {"adam_step_g", s.opt_g.step},
                      {"adam_step_d", s.opt_d.step},
                      {"rng_key", s.rng.key()},
                      {"rng_counter", s.rng.counter()},
                      {"config", to_json(s.cfg)}};
  std::ofstream out(dir / kStateDir / "state.json");
  out << state.dump(2) << '\n';
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write state.json");
}

TrainState load_train_state(const fs::path& dir) {
  const fs::path sp = dir / kStateDir / "state.json";
  std::ifstream in(sp);
  if (!in) throw CheckpointError(CheckpointError::Kind::kMissing, "'" + sp.string() + "' not found");
  json state;
  try {
    state = json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kCorruptManifest,
                          "cannot parse '" + sp.string() + "': " + e.what());
  }
  TrainState s = init_train_state(train_config_from_json(state.at("config")));
  load_tensors(dir, param_values(s.model.gen.params()));
  load_tensors(dir / kStateDir, aux_tensors(s));
  try {
    s.step = state.at("step").get<std::uint64_t>();
    s.epoch = state.at("epoch").get<std::size_t>();
    s.opt_g.step = state.at("adam_step_g").get<std::uint64_t>();
    s.opt_d.step = state.at("adam_step_d").get<std::uint64_t>();
    s.rng = Rng::restore(state.at("rng_key").get<std::uint64_t>(),
                         state.at("rng_counter").get<std::uint64_t>());
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kCorruptManifest,
                          std::string("malformed state.json: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------- loop

void train(TrainState& s, UnpairedDataset& data, const StepCallback& on_step) {
  const TrainConfig& cfg = s.cfg;
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "train_log.csv";
  const bool fresh = !fs::exists(log_path) || fs::file_size(log_path) == 0;
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot open '" + log_path.string() + "'");
  if (fresh) log << kTrainLogHeader << '\n';

  const std::size_t n = data.epoch_length();
  bool stop = false;
  while (s.epoch < cfg.epochs && !stop) {
    data.begin_epoch(s.epoch);
    for (std::size_t i = 0; i + cfg.batch_size <= std::max(n, cfg.batch_size); i += cfg.batch_size) {
      if (cfg.max_steps != 0 && s.step >= cfg.max_steps) {
        stop = true;
        break;
      }
      std::vector<Tensor<float>> xs, ys;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        auto [x, y] = data.get((i + b) % n);
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
      }
      const StepLog row = train_step(s, batch_of(xs), batch_of(ys));
      log << format_log_row(row) << '\n';
      if (on_step) on_step(row);
    }
    log.flush();
    if (stop) break;
    ++s.epoch;
    if (cfg.checkpoint_every != 0 && (s.epoch % cfg.checkpoint_every == 0 || s.epoch == cfg.epochs)) {
      save_train_state(s, out_dir / "checkpoint");
    }
  }
  if (stop && cfg.checkpoint_every != 0) save_train_state(s, out_dir / "checkpoint");
}

}  // namespace uidkat
