#include "uidkat/eval.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>

#include "uidkat/image.hpp"
#include "uidkat/losses.hpp"

namespace uidkat {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- metrics

template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& gt, double max_value) {
  expect_shape(pred.shape(), gt.shape(), "psnr");
  if (pred.numel() == 0) throw ShapeError("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.numel());
  if (mse == 0) return kPsnrIdentical;
  return 10.0 * std::log10(max_value * max_value / mse);
}

namespace {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
};

std::vector<Plane> planes_of(const Shape& s, const auto& data, SsimChannels mode) {
  std::size_t C, H, W;
  if (s.size() == 3) {
    C = s[0], H = s[1], W = s[2];
  } else if (s.size() == 4 && s[0] == 1) {
    C = s[1], H = s[2], W = s[3];
  } else {
    throw ShapeError("ssim: expected (C, H, W) or (1, C, H, W), got " + shape_str(s));
  }
  const std::size_t n = H * W;
  std::vector<Plane> out;
  if (C == 3 && mode == SsimChannels::kLuma) {
    Plane p{H, W, std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      p.v[i] = 0.299 * static_cast<double>(data[i]) + 0.587 * static_cast<double>(data[n + i]) +
               0.114 * static_cast<double>(data[2 * n + i]);
    }
    out.push_back(std::move(p));
    return out;
  }
  for (std::size_t c = 0; c < C; ++c) {
    Plane p{H, W, std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) p.v[i] = static_cast<double>(data[c * n + i]);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<double> gaussian_window() {
  std::vector<double> g(kSsimWindow);
  const double c = (kSsimWindow - 1) / 2.0;
  double s = 0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    g[i] = std::exp(-(i - c) * (i - c) / (2 * kSsimSigma * kSsimSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Valid-mode separable Gaussian filtering.
std::vector<double> filter(const std::vector<double>& img, std::size_t h, std::size_t w,
                           const std::vector<double>& g) {
  const std::size_t k = g.size(), ho = h - k + 1, wo = w - k + 1;
  std::vector<double> rows(h * wo), out(ho * wo);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * img[y * w + x + i];
      rows[y * wo + x] = s;
    }
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * rows[(y + i) * wo + x];
      out[y * wo + x] = s;
    }
  return out;
}

double ssim_plane(const Plane& a, const Plane& b) {
  const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const auto g = gaussian_window();
  const std::size_t n = a.v.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.v[i] * a.v[i];
    bb[i] = b.v[i] * b.v[i];
    ab[i] = a.v[i] * b.v[i];
  }
  const auto mu1 = filter(a.v, a.h, a.w, g), mu2 = filter(b.v, a.h, a.w, g);
  const auto e11 = filter(aa, a.h, a.w, g), e22 = filter(bb, a.h, a.w, g),
             e12 = filter(ab, a.h, a.w, g);
  double total = 0;
  for (std::size_t i = 0; i < mu1.size(); ++i) {
    // Same-argument terms use identical operations, so ssim(x, x) is exactly 1.
    const double s1 = e11[i] - mu1[i] * mu1[i];
    const double s2 = e22[i] - mu2[i] * mu2[i];
    const double s12 = e12[i] - mu1[i] * mu2[i];
    const double num = (2 * mu1[i] * mu2[i] + C1) * (2 * s12 + C2);
    const double den = (mu1[i] * mu1[i] + mu2[i] * mu2[i] + C1) * (s1 + s2 + C2);
    total += num / den;
  }
  return total / static_cast<double>(mu1.size());
}

}  // namespace

template <typename T>
double ssim(const Tensor<T>& pred, const Tensor<T>& gt, SsimChannels mode) {
  expect_shape(pred.shape(), gt.shape(), "ssim");
  const auto pa = planes_of(pred.shape(), pred.vec(), mode);
  const auto pb = planes_of(gt.shape(), gt.vec(), mode);
  if (pa[0].h < kSsimWindow || pa[0].w < kSsimWindow) {
    throw ShapeError("ssim: image " + shape_str(pred.shape()) + " is smaller than the 11x11 window");
  }
  double s = 0;
  for (std::size_t c = 0; c < pa.size(); ++c) s += ssim_plane(pa[c], pb[c]);
  return s / static_cast<double>(pa.size());
}

EvalResult eval_folder(const fs::path& pred_dir, const fs::path& gt_dir, SsimChannels mode) {
  const auto preds = list_images(pred_dir);
  if (preds.empty()) throw IoError("no PNG/JPEG images in '" + pred_dir.string() + "'");
  std::map<std::string, fs::path> gts;
  for (const auto& p : list_images(gt_dir)) gts[p.filename().string()] = p;
  EvalResult r;
  for (const auto& p : preds) {
    const std::string name = p.filename().string();
    const auto it = gts.find(name);
    if (it == gts.end()) {
      throw IoError("ground truth for '" + name + "' missing in '" + gt_dir.string() + "'");
    }
    const auto a = read_image(p), b = read_image(it->second);
    if (a.shape() != b.shape()) {
      throw ShapeError("'" + name + "': prediction " + shape_str(a.shape()) +
                       " and ground truth " + shape_str(b.shape()) + " differ in size");
    }
    r.rows.push_back({name, psnr(a, b), ssim(a, b, mode)});
  }
  std::sort(r.rows.begin(), r.rows.end(),
            [](const EvalRow& x, const EvalRow& y) { return x.name < y.name; });
  r.mean.name = "mean";
  for (const auto& row : r.rows) {
    r.mean.psnr_db += row.psnr_db;
    r.mean.ssim += row.ssim;
  }
  r.mean.psnr_db /= static_cast<double>(r.rows.size());
  r.mean.ssim /= static_cast<double>(r.rows.size());
  return r;
}

void write_eval_csv(std::ostream& out, const EvalResult& result) {
  const auto fmt = [](double v) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  out << "name,psnr_db,ssim\n";
  for (const auto& r : result.rows) out << r.name << ',' << fmt(r.psnr_db) << ',' << fmt(r.ssim) << '\n';
  out << result.mean.name << ',' << fmt(result.mean.psnr_db) << ',' << fmt(result.mean.ssim) << '\n';
}

// ---------------------------------------------------------------- audit

AuditReference table_reference(char variant) {
  switch (std::toupper(static_cast<unsigned char>(variant))) {
    case 'T': return {1.94, 2.88};
    case 'S': return {7.70, 10.59};
    case 'B': return {18.08, 38.28};
    default: throw ShapeError(std::string("no reference figures for variant '") + variant + "'");
  }
}

namespace {

template <typename M>
std::size_t count_params(M& module) {
  ParamRefs<float> ps;
  module.collect(ps);
  return count_elements(ps);
}

std::vector<std::string> assumptions_for(const GeneratorConfig& cfg, std::size_t size, bool aux) {
  const auto& b = cfg.block;
  std::ostringstream mixer;
  const auto units = b.units();
  for (std::size_t i = 0; i < units.size(); ++i) mixer << (i ? " + " : "") << mixer_name(units[i]);
  std::vector<std::string> a = {
      "input " + std::to_string(size) + "x" + std::to_string(size) + ", batch 1",
      "MAC convention: conv Cout*Cin*k^2*H'*W', linear d_in*d_out*N, rational (m+n+2) per "
      "element; norms, activations, pooling, upsampling and elementwise ops excluded",
      "parameters include biases, layer-norm affine terms and rational coefficients; encoder "
      "and decoder instance norms carry no affine terms",
      std::string("skip merge: ") + std::string(skip_mode_name(cfg.skip_mode)) +
          " (stem -> second up stage, first down stage -> first up stage)",
      "stem 7x7 reflect conv 3->ngf, down stages 3x3 stride-2 convs, up stages nearest 2x "
      "upsample + 3x3 conv, head 7x7 reflect conv ngf->3; ngf = " + std::to_string(cfg.ngf),
      "SCConv after every encoder/decoder stage: channel halves, one plain 3x3 conv on the "
      "first, self-calibration (3x3 convs at 1/" + std::to_string(cfg.scconv_rate) +
          " and full resolution) on the second",
      std::to_string(cfg.n_blocks) + " KAT blocks at 1/4 resolution: " +
          std::to_string(b.patch_size) + "x" + std::to_string(b.patch_size) +
          " patch-embed conv to D = " + std::to_string(b.embed_dim) + ", units " + mixer.str() +
          ", unembed " + std::to_string(b.unembed_kernel) + "x" + std::to_string(b.unembed_kernel) +
          " conv to C*P^2 + pixel shuffle",
      "GR-KAN mixers: " + std::string(b.grkan_layers == 2 ? "D -> " + std::to_string(b.hidden_ratio) + "D -> D" : "D -> D") +
          ", rational P/Q orders (" + std::to_string(b.num_order) + ", " +
          std::to_string(b.den_order) + "), " + std::to_string(b.grkan_groups) + " groups",
      aux ? "discriminator (70x70 PatchGAN, ndf 64) and five projection heads (C -> 256 -> 256, "
            "64 locations each) included"
          : "generator only: discriminator and projection heads excluded",
  };
  return a;
}

}  // namespace

AuditReport audit_model(const GeneratorConfig& cfg, std::size_t input_size, bool include_auxiliary) {
  cfg.validate();
  check_generator_input({1, 3, input_size, input_size});
  Rng rng(0);
  Model<float> m = build_model<float>(cfg, rng);
  auto& g = m.gen;
  const std::size_t s = input_size;
  AuditReport r;
  r.variant = cfg.variant;
  r.input_size = s;
  r.includes_auxiliary = include_auxiliary;
  r.parts.push_back({"stem", count_params(g.stem), g.stem.macs(1, s, s)});
  r.parts.push_back({"down1", count_params(g.down1), g.down1.macs(1, s, s)});
  r.parts.push_back({"down2", count_params(g.down2), g.down2.macs(1, s / 2, s / 2)});
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    r.parts.push_back({"block" + std::to_string(i), count_params(g.blocks[i]),
                       g.blocks[i].macs(1, s / 4, s / 4)});
  }
  r.parts.push_back({"up1", count_params(g.up1), g.up1.macs(1, s / 4, s / 4)});
  r.parts.push_back({"up2", count_params(g.up2), g.up2.macs(1, s / 2, s / 2)});
  r.parts.push_back({"head", count_params(g.head), g.head.macs(1, s, s)});
  if (include_auxiliary) {
    r.parts.push_back({"discriminator", count_params(m.disc), m.disc.macs(1, s, s)});
    for (std::size_t l = 0; l < m.heads.size(); ++l) {
      r.parts.push_back({std::string("proj.") + std::string(kFeatureLayerNames[l]),
                         count_params(m.heads[l]), m.heads[l].macs(kDefaultNceLocations)});
    }
  }
  for (const auto& p : r.parts) {
    r.total_params += p.params;
    r.total_macs += p.macs;
  }
  try {
    r.reference = table_reference(cfg.variant);
    r.params_deviation = r.total_params / (r.reference.params_m * 1e6) - 1.0;
    r.macs_deviation = static_cast<double>(r.total_macs) / (r.reference.macs_g * 1e9) - 1.0;
  } catch (const ShapeError&) {
    r.reference = {};
  }
  r.assumptions = assumptions_for(cfg, s, include_auxiliary);

  GeneratorConfig alt = cfg;
  alt.skip_mode = cfg.skip_mode == SkipMode::kAdd ? SkipMode::kConcat : SkipMode::kAdd;
  Rng rng2(0);
  auto alt_gen = make_generator<float>(alt, rng2);
  const std::size_t aux_params = include_auxiliary ? r.total_params - count_params(g) : 0;
  const std::uint64_t aux_macs = include_auxiliary ? r.total_macs - g.macs(1, s, s) : 0;
  r.other_skip_mode = std::string(skip_mode_name(alt.skip_mode));
  r.other_params = count_params(alt_gen) + aux_params;
  r.other_macs = alt_gen.macs(1, s, s) + aux_macs;
  return r;
}

AuditReport audit_variant(char variant, std::size_t input_size, bool include_auxiliary) {
  return audit_model(variant_config(variant), input_size, include_auxiliary);
}

void print_audit(std::ostream& out, const AuditReport& r) {
  const auto old_flags = out.flags();
  out << "UID-KAT variant " << r.variant << " audit at " << r.input_size << "x" << r.input_size
      << (r.includes_auxiliary ? " (generator + discriminator + heads)" : " (generator only)")
      << "\n\n";
  out << std::left << std::setw(22) << "part" << std::right << std::setw(14) << "params"
      << std::setw(18) << "MACs" << '\n';
  for (const auto& p : r.parts) {
    out << std::left << std::setw(22) << p.name << std::right << std::setw(14) << p.params
        << std::setw(18) << p.macs << '\n';
  }
  out << std::left << std::setw(22) << "total" << std::right << std::setw(14) << r.total_params
      << std::setw(18) << r.total_macs << "\n\n";
  out << std::fixed << std::setprecision(3);
  out << "params  " << r.total_params / 1e6 << " M";
  if (r.reference.params_m > 0) {
    out << "   reference " << r.reference.params_m << " M   deviation " << std::showpos
        << 100 * r.params_deviation << std::noshowpos << " %";
  }
  out << "\nMACs    " << r.total_macs / 1e9 << " G";
  if (r.reference.macs_g > 0) {
    out << "   reference " << r.reference.macs_g << " G   deviation " << std::showpos
        << 100 * r.macs_deviation << std::noshowpos << " %";
  }
  out << "\nwith " << (r.other_skip_mode) << " skips: " << r.other_params / 1e6 << " M params, "
      << r.other_macs / 1e9 << " G MACs\n\nassumptions:\n";
  for (const auto& a : r.assumptions) out << "  - " << a << '\n';
  out.flags(old_flags);
}

json to_json(const AuditReport& r) {
  json parts = json::array();
  for (const auto& p : r.parts) parts.push_back({{"name", p.name}, {"params", p.params}, {"macs", p.macs}});
  return {{"variant", std::string(1, r.variant)},
          {"input_size", r.input_size},
          {"includes_auxiliary", r.includes_auxiliary},
          {"parts", parts},
          {"total_params", r.total_params},
          {"total_macs", r.total_macs},
          {"reference", {{"params_m", r.reference.params_m}, {"macs_g", r.reference.macs_g}}},
          {"params_deviation", r.params_deviation},
          {"macs_deviation", r.macs_deviation},
          {"other_skip_mode",
           {{"skip_mode", r.other_skip_mode}, {"params", r.other_params}, {"macs", r.other_macs}}},
          {"assumptions", r.assumptions}};
}

// ---------------------------------------------------------------- inference

Tensor<float> restore_image(const Generator<float>& gen, const Tensor<float>& unit_image,
                            std::size_t max_pixels) {
  if (unit_image.rank() != 3 || unit_image.dim(0) != 3) {
    throw ShapeError("restore_image: expected (3, H, W), got " + shape_str(unit_image.shape()));
  }
  const std::size_t H = unit_image.dim(1), W = unit_image.dim(2);
  if (H * W > max_pixels) {
    throw ShapeError("image " + std::to_string(W) + "x" + std::to_string(H) + " exceeds the " +
                     std::to_string(max_pixels) + "-pixel cap");
  }
  const std::size_t h = (H + 15) / 16 * 16, w = (W + 15) / 16 * 16;
  const Tensor<float> padded = reflect_pad_to(unit_image, h, w);
  const Tensor<float> out = gen.forward(batch_of({to_signed(padded)}));
  return crop(to_unit(image_at(out, 0)), H, W);
}

std::vector<fs::path> expand_inputs(const std::vector<fs::path>& paths) {
  std::vector<fs::path> out;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      for (auto& f : list_images(p)) out.push_back(std::move(f));
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw IoError("input '" + p.string() + "' does not exist");
    }
  }
  return out;
}

std::vector<fs::path> infer_files(const Generator<float>& gen, const std::vector<fs::path>& inputs,
                                  const fs::path& out_dir, std::size_t max_pixels) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& in : inputs) {
    const fs::path dst = out_dir / (in.stem().string() + ".png");
    write_png(dst, restore_image(gen, read_image(in), max_pixels));
    written.push_back(dst);
  }
  return written;
}

// ---------------------------------------------------------------- bench

void summarize(BenchResult& r) {
  if (r.seconds.empty()) throw ShapeError("bench: no samples");
  double s = 0;
  for (double v : r.seconds) s += v;
  r.mean = s / static_cast<double>(r.seconds.size());
  auto sorted = r.seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

BenchResult bench_generator(const Generator<float>& gen, std::size_t size, std::size_t repeats,
                            std::size_t warmup) {
  if (repeats == 0) throw ShapeError("bench: repeats must be positive");
  check_generator_input({1, 3, size, size});
  Rng rng(0);
  Tensor<float> x({1, 3, size, size});
  for (auto& v : x.vec()) v = static_cast<float>(rng.uniform(-1, 1));
  BenchResult r;
  r.warmup = warmup;
  r.threads = static_cast<std::size_t>(Eigen::nbThreads());
#ifdef NDEBUG
  r.build = "release";
#else
  r.build = "debug";
#endif
  for (std::size_t i = 0; i < warmup; ++i) gen.forward(x);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto y = gen.forward(x);
    const auto t1 = std::chrono::steady_clock::now();
    r.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  summarize(r);
  return r;
}

template double psnr(const Tensor<float>&, const Tensor<float>&, double);
template double psnr(const Tensor<double>&, const Tensor<double>&, double);
template double ssim(const Tensor<float>&, const Tensor<float>&, SsimChannels);
template double ssim(const Tensor<double>&, const Tensor<double>&, SsimChannels);

}  // namespace uidkat
