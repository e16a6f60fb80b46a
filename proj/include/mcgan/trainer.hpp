// SPDX-License-Identifier: Apache-2.0
//
// Adversarial training: tuple assembly, alternating discriminator/generator
// updates, learning-rate schedule, NDJSON logging and resumable checkpoints.
//
// Training state is saved only at epoch boundaries. At that point the RNG
// has consumed every draw of the finished epoch, so the saved state, weights
// and Adam moments are enough to continue bit-exactly.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mcgan/checkpoint.hpp"
#include "mcgan/data.hpp"
#include "mcgan/discriminator.hpp"
#include "mcgan/generator.hpp"
#include "mcgan/losses.hpp"
#include "mcgan/optim.hpp"

namespace mcgan {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Hyperparams hp;
  double lr0 = 0.0002;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int batch = 32;
  int epochs = 200;
  int lr_decay_every = 200;  // epochs
  double lr_decay_factor = 0.5;
  std::uint64_t seed = 0;
  AugmentFlags augment;
  SelectorParams selector;
  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  long long max_steps = 0;   // 0 = no limit
  bool deterministic = true;

  // 64x64 toy setting with N = 3 and a reduced channel plan.
  static TrainConfig toy() {
    TrainConfig c;
    c.hp.width = c.hp.height = 64;
    c.hp.blocks = 3;
    c.hp.seed_channels = 64;
    c.hp.disc_channels = 32;
    c.hp.lambda2 = 20.0;
    return c;
  }

  void validate() const {
    hp.validate();
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(lr0 >= 0.0)) fail("lr0 must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("Adam betas in [0,1)");
    if (batch < 2) fail("batch must be at least 2 (mismatched tuples need a derangement)");
    if (epochs < 1) fail("epochs must be positive");
    if (lr_decay_every < 1) fail("lr_decay_every must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) fail("lr_decay_factor must be in (0, 1]");
    if (checkpoint_every < 0 || max_steps < 0) fail("checkpoint_every and max_steps must be non-negative");
    selector.validate();
  }
};

inline void to_json(nlohmann::json& j, const SelectorParams& p) {
  j = {{"kernel", p.kernel}, {"iterations", p.iterations}, {"threshold", p.threshold}};
}
inline void from_json(const nlohmann::json& j, SelectorParams& p) {
  p.kernel = j.value("kernel", p.kernel);
  p.iterations = j.value("iterations", p.iterations);
  p.threshold = j.value("threshold", p.threshold);
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, hp, lr0, adam_beta1, adam_beta2, batch, epochs,
                                                lr_decay_every, lr_decay_factor, seed, augment, selector,
                                                checkpoint_every, max_steps, deterministic)

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    auto cfg = nlohmann::json::parse(in).get<TrainConfig>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

// lr0 * factor^floor(epoch / period)
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  return cfg.lr0 * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
}

// Cyclic shift by one: element i is paired with element (i + 1) mod n.
inline std::vector<int> cyclic_derangement(int n) {
  if (n < 2) throw std::invalid_argument("derangement needs at least 2 elements");
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = (i + 1) % n;
  return p;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<int>& perm) {
  const std::size_t row = t.size() / static_cast<std::size_t>(t.dim(0));
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(t.data() + row * static_cast<std::size_t>(perm[i]), row, out.data() + row * i);
  }
  return out;
}

template <class T>
struct TupleBatch {
  Tensor<T> image;           // real x       [B,3,H,W]
  Tensor<T> mask;            // real s       [B,1,H,W]
  Tensor<T> phi;             // matching φ   [B,E]
  Tensor<T> phi_mismatch;    // φ of another sample
  Tensor<T> mask_mismatch;   // s of another sample
  Tensor<T> base;            // object-free b
  Tensor<T> epsilon;         // [B,C]
  Tensor<T> z;               // [B,Z]
  std::vector<int> text_perm, mask_perm;
  GenOutput<T> fake;         // generated from (base, φ, z, ε)
  ConditioningResult<T> cond;

  int size() const { return image.dim(0); }
};

template <class T>
Tensor<T> to_batch(const std::vector<Tensor<float>>& items) {
  std::vector<Tensor<T>> cast;
  cast.reserve(items.size());
  for (const auto& t : items) cast.push_back(t.template cast<T>());
  return stack_batch(cast);
}

// Assembles real, mismatched and fake tuples. Fakes use the batch captions on
// the supplied bases with fresh z and ε; the generator graph is recorded when
// gradients are enabled so the same fakes can drive the generator update.
template <class T>
TupleBatch<T> make_tuples(const std::vector<SceneSample>& samples, const std::vector<Tensor<float>>& bases,
                          Generator<T>& gen, Rng& rng) {
  const int B = static_cast<int>(samples.size());
  if (B < 2) throw std::invalid_argument("make_tuples: batch size must be at least 2");
  if (static_cast<int>(bases.size()) != B) throw std::invalid_argument("make_tuples: one base per sample required");
  const auto& hp = gen.hyperparams();
  std::vector<Tensor<float>> imgs, masks, phis;
  for (const auto& s : samples) {
    s.validate();
    imgs.push_back(s.image);
    masks.push_back(s.mask);
    if (s.embedding.dim() != hp.embed_dim) throw ShapeError("make_tuples: embedding dimension mismatch");
    phis.push_back(Tensor<float>({1, hp.embed_dim}, s.embedding.values));
  }
  TupleBatch<T> tb;
  tb.image = to_batch<T>(imgs);
  tb.mask = to_batch<T>(masks);
  tb.phi = to_batch<T>(phis);
  tb.base = to_batch<T>(bases);
  tb.text_perm = cyclic_derangement(B);
  tb.mask_perm = cyclic_derangement(B);
  tb.phi_mismatch = gather_rows(tb.phi, tb.text_perm);
  tb.mask_mismatch = gather_rows(tb.mask, tb.mask_perm);
  tb.epsilon = rng.normal_tensor<T>({B, hp.code_dim});
  tb.z = rng.normal_tensor<T>({B, hp.noise_dim});
  auto [out, cond] = gen.generate_from_embedding(Var<T>::constant(tb.base), Var<T>::constant(tb.phi), tb.epsilon,
                                                 Var<T>::constant(tb.z));
  tb.fake = std::move(out);
  tb.cond = std::move(cond);
  return tb;
}

struct StepLosses {
  double d1 = 0, d2 = 0, d3 = 0, g = 0, kl = 0, l1_bg = 0;

  bool finite() const {
    for (double v : {d1, d2, d3, g, kl, l1_bg}) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline void to_json(nlohmann::json& j, const StepLosses& l) {
  j = {{"L_D1", l.d1}, {"L_D2", l.d2}, {"L_D3", l.d3}, {"L_G", l.g}, {"KL", l.kl}, {"L1_bg", l.l1_bg}};
}
inline void from_json(const nlohmann::json& j, StepLosses& l) {
  l.d1 = j.at("L_D1").get<double>();
  l.d2 = j.at("L_D2").get<double>();
  l.d3 = j.at("L_D3").get<double>();
  l.g = j.at("L_G").get<double>();
  l.kl = j.at("KL").get<double>();
  l.l1_bg = j.at("L1_bg").get<double>();
}

struct EpochSummary {
  int epoch = 0;  // number of completed epochs
  long long step = 0;
  int batches = 0;
  StepLosses mean;
};

template <class T>
double scalar(const Var<T>& v) {
  return static_cast<double>(v.value()[0]);
}

template <class T = float>
class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochSummary&, Trainer&)>;

  Trainer(TrainConfig cfg, const SampleSource& data)
      : cfg_(std::move(cfg)), data_(&data), rng_(cfg_.seed) {
    cfg_.validate();
    if (data.image_size() != cfg_.hp.width) {
      throw ConfigError("dataset resolution " + std::to_string(data.image_size()) + " does not match model width " +
                        std::to_string(cfg_.hp.width));
    }
    if (data.size() < cfg_.batch) throw ConfigError("dataset smaller than one batch");
    Rng init(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
    gen_.emplace(cfg_.hp, init);
    disc_.emplace(cfg_.hp, init);
    opt_g_ = Adam<T>(gen_->trainable(), cfg_.adam_beta1, cfg_.adam_beta2);
    opt_d_ = Adam<T>(disc_->trainable(), cfg_.adam_beta1, cfg_.adam_beta2);
  }

  const TrainConfig& config() const { return cfg_; }
  Generator<T>& generator() { return *gen_; }
  Discriminator<T>& discriminator() { return *disc_; }
  Rng& rng() { return rng_; }
  int epoch() const { return epoch_; }
  long long step() const { return step_; }
  bool finished() const { return epoch_ >= cfg_.epochs || (cfg_.max_steps > 0 && step_ >= cfg_.max_steps); }

  void set_log(std::ostream* log) { log_ = log; }
  void set_epoch_callback(EpochCallback cb) { on_epoch_ = std::move(cb); }
  // Where NaN diagnostics are written (defaults to the working directory).
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

  // One discriminator update on L_D1 + L_D2 + L_D3 (fakes detached), then one
  // generator update on adversarial + λ1·KL + λ2·L1_bg.
  StepLosses train_step(const TupleBatch<T>& tb, double lr) {
    gen_->set_training(true);
    disc_->set_training(true);
    const auto& hp = cfg_.hp;
    StepLosses out;
    auto x = Var<T>::constant(tb.image);
    auto s = Var<T>::constant(tb.mask);
    auto phi = Var<T>::constant(tb.phi);
    auto phi_mm = Var<T>::constant(tb.phi_mismatch);
    auto s_mm = Var<T>::constant(tb.mask_mismatch);
    auto xg_det = tb.fake.image.detach();
    auto sg_det = tb.fake.mask.detach();

    opt_d_.zero_grad();
    if (hp.with_mask) {
      TupleScores<T> sc;
      auto txt = disc_->text_code(phi);
      sc.d1_real = disc_->head1(disc_->encode_image(x));
      auto im_real = disc_->encode_image_mask(x, s);
      sc.d2_real = disc_->head2(im_real);
      sc.d3_real = disc_->head3(disc_->fuse_text(im_real, txt));
      sc.d3_mismatch_text = disc_->head3(disc_->fuse_text(im_real, disc_->text_code(phi_mm)));
      auto im_mm = disc_->encode_image_mask(x, s_mm);
      sc.d2_mismatch_mask = disc_->head2(im_mm);
      sc.d3_mismatch_mask = disc_->head3(disc_->fuse_text(im_mm, txt));
      sc.d1_fake = disc_->head1(disc_->encode_image(xg_det));
      auto im_fake = disc_->encode_image_mask(xg_det, sg_det);
      sc.d2_fake = disc_->head2(im_fake);
      sc.d3_fake = disc_->head3(disc_->fuse_text(im_fake, txt));
      auto ld = loss_D(sc);
      out.d1 = scalar(ld.d1);
      out.d2 = scalar(ld.d2);
      out.d3 = scalar(ld.d3);
      check_finite(out, "discriminator");
      backward(ld.total());
    } else {
      NoMaskScores<T> sc;
      auto txt = disc_->text_code(phi);
      auto code_real = disc_->encode_image(x);
      sc.d1_real = disc_->head1(code_real);
      sc.d3_real = disc_->head3(disc_->fuse_text(code_real, txt));
      sc.d3_mismatch_text = disc_->head3(disc_->fuse_text(code_real, disc_->text_code(phi_mm)));
      auto code_fake = disc_->encode_image(xg_det);
      sc.d1_fake = disc_->head1(code_fake);
      sc.d3_fake = disc_->head3(disc_->fuse_text(code_fake, txt));
      auto ld = loss_D_no_mask(sc);
      out.d3 = scalar(ld);
      check_finite(out, "discriminator");
      backward(ld);
    }
    opt_d_.step(lr);

    // Generator update through the refreshed discriminator.
    opt_g_.zero_grad();
    opt_d_.zero_grad();
    GeneratorLoss<T> lg;
    if (hp.with_mask) {
      auto xg = tb.fake.image, sg = tb.fake.mask;
      auto txt = disc_->text_code(phi);
      auto d1 = disc_->head1(disc_->encode_image(xg));
      auto im = disc_->encode_image_mask(xg, sg);
      auto d2 = disc_->head2(im);
      auto d3 = disc_->head3(disc_->fuse_text(im, txt));
      lg = loss_G(d1, d2, d3, tb.cond.mu, tb.cond.sigma, xg, sg.value(), tb.base, hp.lambda1, hp.lambda2,
                  cfg_.selector);
    } else {
      auto txt = disc_->text_code(phi);
      auto code = disc_->encode_image(tb.fake.image);
      lg = loss_G_no_mask(disc_->head1(code), disc_->head3(disc_->fuse_text(code, txt)), tb.cond.mu, tb.cond.sigma,
                          hp.lambda1);
    }
    out.g = scalar(lg.total);
    out.kl = scalar(lg.kl);
    out.l1_bg = scalar(lg.l1_bg);
    check_finite(out, "generator");
    backward(lg.total);
    opt_g_.step(lr);
    opt_d_.zero_grad();
    return out;
  }

  // Draws one batch (samples, augmentation, bases) from the trainer RNG.
  TupleBatch<T> next_batch(const std::vector<int>& indices) {
    std::vector<SceneSample> samples;
    std::vector<Tensor<float>> bases;
    for (int i : indices) {
      SceneSample s = data_->get(i, rng_);
      if (cfg_.augment.flip || cfg_.augment.zoom || cfg_.augment.crop) {
        std::tie(s.image, s.mask) = augment(s.image, s.mask, rng_, cfg_.augment);
      }
      samples.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < indices.size(); ++i) bases.push_back(data_->background(rng_));
    return make_tuples(samples, bases, *gen_, rng_);
  }

  // Runs whole epochs until the configured end (or max_steps). Checkpoints
  // go to `out_dir`/checkpoints/epoch_NNNN and the final state to
  // `out_dir`/final.
  void run(const std::filesystem::path& out_dir) {
    const auto start = std::chrono::steady_clock::now();
    const int per_epoch = data_->size() / cfg_.batch;
    while (!finished()) {
      const double lr = lr_schedule(epoch_, cfg_);
      std::vector<int> order(static_cast<std::size_t>(data_->size()));
      std::iota(order.begin(), order.end(), 0);
      shuffle(order);
      EpochSummary summary;
      for (int b = 0; b < per_epoch && !(cfg_.max_steps > 0 && step_ >= cfg_.max_steps); ++b) {
        std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(b) * cfg_.batch,
                             order.begin() + static_cast<std::ptrdiff_t>(b + 1) * cfg_.batch);
        auto tb = next_batch(idx);
        const StepLosses l = train_step(tb, lr);
        ++step_;
        accumulate_summary(summary, l);
        if (log_) {
          nlohmann::json rec = l;
          rec["step"] = step_;
          rec["epoch"] = epoch_;
          rec["lr"] = lr;
          rec["wallclock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          *log_ << rec.dump() << "\n" << std::flush;
        }
      }
      if (summary.batches < per_epoch) break;  // step limit hit mid-epoch
      ++epoch_;
      summary.epoch = epoch_;
      summary.step = step_;
      if (summary.batches > 0) {
        const double n = summary.batches;
        summary.mean = {summary.mean.d1 / n, summary.mean.d2 / n, summary.mean.d3 / n,
                        summary.mean.g / n,  summary.mean.kl / n, summary.mean.l1_bg / n};
      }
      last_summary_ = summary;
      if (on_epoch_) on_epoch_(summary, *this);
      if (cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0 && !out_dir.empty()) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d", epoch_);
        save(out_dir / "checkpoints" / name);
      }
    }
    if (!out_dir.empty()) save(out_dir / "final");
  }

  // Everything needed to continue: weights, BN buffers, Adam moments, RNG
  // state and counters. Contains no timing data, so equal runs give equal
  // files.
  void save(const std::filesystem::path& dir) const {
    CheckpointManifest m;
    m.hp = cfg_.hp;
    m.bn_mode = "inference";
    m.extra = {{"train_state",
                {{"epoch", epoch_},
                 {"step", step_},
                 {"rng", rng_.state()},
                 {"adam_g_steps", opt_g_.steps()},
                 {"adam_d_steps", opt_d_.steps()},
                 {"last_epoch_losses", last_summary_.mean}}},
               {"train_config", cfg_}};
    save_checkpoint(dir, m, all_tensors());
  }

  void resume(const std::filesystem::path& dir) {
    const auto m = read_manifest(dir);
    if (!(m.hp == cfg_.hp)) throw ConfigError("checkpoint hyperparams differ from the training config");
    if (!m.extra.contains("train_state")) throw FormatError("checkpoint has no training state: " + dir.string());
    TensorList<T> model = gen_->tensors();
    for (auto& t : disc_->tensors()) model.push_back(t);
    load_tensors(dir, model);
    for (auto [opt, prefix] : {std::pair{&opt_g_, "adam_g"}, std::pair{&opt_d_, "adam_d"}}) {
      const TensorList<T> moments = opt->state(prefix);
      load_tensors(dir, moments);
      opt->load_state(moments);
    }
    const auto& st = m.extra.at("train_state");
    epoch_ = st.at("epoch").get<int>();
    step_ = st.at("step").get<long long>();
    rng_.set_state(st.at("rng").get<std::string>());
    opt_g_.set_steps(st.at("adam_g_steps").get<long long>());
    opt_d_.set_steps(st.at("adam_d_steps").get<long long>());
    last_summary_.mean = st.at("last_epoch_losses").get<StepLosses>();
  }

  TensorList<T> all_tensors() const {
    TensorList<T> out = gen_->tensors();
    for (auto& t : disc_->tensors()) out.push_back(t);
    for (auto& t : opt_g_.state("adam_g")) out.push_back(t);
    for (auto& t : opt_d_.state("adam_d")) out.push_back(t);
    return out;
  }

 private:
  void shuffle(std::vector<int>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const int j = rng_.uniform_int(0, static_cast<int>(i) - 1);
      std::swap(v[i - 1], v[static_cast<std::size_t>(j)]);
    }
  }

  static void accumulate_summary(EpochSummary& s, const StepLosses& l) {
    ++s.batches;
    s.mean.d1 += l.d1;
    s.mean.d2 += l.d2;
    s.mean.d3 += l.d3;
    s.mean.g += l.g;
    s.mean.kl += l.kl;
    s.mean.l1_bg += l.l1_bg;
  }

  void check_finite(const StepLosses& l, const char* phase) {
    if (l.finite()) return;
    nlohmann::json dump = l;
    dump["phase"] = phase;
    dump["step"] = step_;
    dump["epoch"] = epoch_;
    std::string where;
    try {
      std::filesystem::create_directories(dump_dir_);
      const auto path = dump_dir_ / ("nan_dump_step" + std::to_string(step_) + ".json");
      std::ofstream(path) << dump.dump(2) << "\n";
      where = " (diagnostics in " + path.string() + ")";
    } catch (const std::exception&) {
    }
    throw TrainingError("non-finite loss in " + std::string(phase) + " update at step " + std::to_string(step_) +
                        ": " + dump.dump() + where);
  }

  TrainConfig cfg_;
  const SampleSource* data_;
  Rng rng_;
  std::optional<Generator<T>> gen_;
  std::optional<Discriminator<T>> disc_;
  Adam<T> opt_g_, opt_d_;
  int epoch_ = 0;
  long long step_ = 0;
  EpochSummary last_summary_;
  std::ostream* log_ = nullptr;
  EpochCallback on_epoch_;
  std::filesystem::path dump_dir_ = ".";
};

}  // namespace mcgan
