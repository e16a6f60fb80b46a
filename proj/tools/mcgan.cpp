// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: dataset generation, training, the experiment
// drivers and the HTTP service.

#include <CLI11.hpp>
#include <malloc.h>

#include <fstream>
#include <iostream>

#include "mcgan/experiments.hpp"
#include "mcgan/service.hpp"
#include "mcgan/trainer.hpp"

namespace {

using namespace mcgan;

struct Common {
  std::string config;
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  bool deterministic = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON configuration file");
  app->add_option("--checkpoint", c.checkpoint, "checkpoint directory");
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--out-dir", c.out_dir, "output directory");
  app->add_flag("--deterministic", c.deterministic,
                "bit-reproducible execution (the build is single-threaded, so this is always the case)");
}

// "shape:color:size", colour either a palette name or "r,g,b" in [0, 1].
AttributeSpec parse_attrs(const std::string& text) {
  const auto a = text.find(':'), b = text.rfind(':');
  if (a == std::string::npos || a == b) throw CLI::ValidationError("attrs", "expected shape:color:size");
  nlohmann::json j;
  j["shape"] = text.substr(0, a);
  j["size"] = text.substr(b + 1);
  const std::string color = text.substr(a + 1, b - a - 1);
  const ToyConfig tc;
  if (color == "red") {
    j["color"] = tc.palette[0];
  } else if (color == "green") {
    j["color"] = tc.palette[1];
  } else if (color == "blue") {
    j["color"] = tc.palette[2];
  } else {
    std::vector<float> rgb;
    std::stringstream ss(color);
    for (std::string part; std::getline(ss, part, ',');) rgb.push_back(std::stof(part));
    if (rgb.size() != 3) throw CLI::ValidationError("attrs", "colour must be red, green, blue or r,g,b");
    j["color"] = rgb;
  }
  return j.get<AttributeSpec>();
}

Generator<float> require_generator(const Common& c) {
  if (c.checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
  return load_generator<float>(c.checkpoint);
}

// Base image at model resolution: a PNG if given, else a toy background.
Tensor<float> load_base(const std::string& path, int size, std::uint64_t seed) {
  if (path.empty()) {
    Rng rng(seed);
    return toy_background(rng, size);
  }
  return resize_bilinear(image_from_mat(read_mat(path, cv::IMREAD_COLOR)), size, size);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees the same large buffers every step; keeping
  // them on the heap avoids repeated page faults from fresh mappings.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);

  CLI::App app{"MC-GAN: multi-conditional object synthesis on background images"};
  app.require_subcommand(1);

  // make-toy-data
  Common toy_c;
  int toy_count = 2000, toy_test = 100, canvas = 64;
  auto* toy = app.add_subcommand("make-toy-data", "write a procedural toy dataset directory");
  add_common(toy, toy_c);
  toy->add_option("--count", toy_count, "number of samples")->check(CLI::PositiveNumber);
  toy->add_option("--test-count", toy_test, "samples assigned to the test split")->check(CLI::NonNegativeNumber);
  toy->add_option("--canvas", canvas, "image side in pixels")->check(CLI::Range(16, 1024));

  // train
  Common tr_c;
  std::string data_manifest, resume;
  int train_toy_count = 2000;
  auto* train = app.add_subcommand("train", "train generator and discriminator");
  add_common(train, tr_c);
  train->add_option("--data", data_manifest, "dataset manifest.json (default: in-memory toy data)");
  train->add_option("--toy-count", train_toy_count, "toy samples when no manifest is given");
  train->add_option("--resume", resume, "training checkpoint to continue from");

  // generate
  Common gen_c;
  std::string base_path, attrs_text = "ellipse:red:medium", bbox_text, mode = "full-paste", embeddings;
  int embedding_row = -1;
  bool debug = false;
  auto* generate = app.add_subcommand("generate", "paint an object into a base image");
  add_common(generate, gen_c);
  generate->add_option("--base", base_path, "base PNG (default: a toy background)");
  generate->add_option("--bbox", bbox_text, "x,y,w,h in base pixels (default: whole image)");
  generate->add_option("--attrs", attrs_text, "toy attributes shape:color:size");
  generate->add_option("--embeddings", embeddings, "embedding table for --embedding-row");
  generate->add_option("--embedding-row", embedding_row, "row of the embedding table to use");
  generate->add_option("--mode", mode, "full-paste or mask-blend");
  generate->add_flag("--debug", debug, "also write switch maps");

  // experiment drivers
  Common ip_c, ns_c, ss_c, st_c;
  std::string attrs_a = "ellipse:red:medium", attrs_b = "triangle:blue:large";
  int steps = 8, stats_count = 100;
  auto* interp = app.add_subcommand("interpolate", "interpolate between two text embeddings");
  add_common(interp, ip_c);
  interp->add_option("--from", attrs_a, "start attributes");
  interp->add_option("--to", attrs_b, "end attributes");
  interp->add_option("--steps", steps, "number of steps")->check(CLI::Range(2, 64));
  interp->add_option("--base", base_path, "base PNG");
  auto* noise = app.add_subcommand("noise-sweep", "sweep z from all-zero to all-one");
  add_common(noise, ns_c);
  noise->add_option("--attrs", attrs_text, "toy attributes");
  noise->add_option("--steps", steps, "number of steps")->check(CLI::Range(2, 64));
  noise->add_option("--base", base_path, "base PNG");
  auto* sweep = app.add_subcommand("switch-sweep", "generate with switches forced to 0, 0.5, 1 and learned");
  add_common(sweep, ss_c);
  sweep->add_option("--attrs", attrs_text, "toy attributes");
  sweep->add_option("--base", base_path, "base PNG");
  auto* stats = app.add_subcommand("switch-stats", "switch/mask statistics on fresh toy samples");
  add_common(stats, st_c);
  stats->add_option("--count", stats_count, "number of toy samples")->check(CLI::PositiveNumber);

  // serve
  Common sv_c;
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  add_common(serve, sv_c);
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port")->check(CLI::Range(1, 65535));
  serve->add_option("--embeddings", embeddings, "embedding table (embeddings.bin)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (toy->parsed()) {
      ToyConfig tc;
      tc.canvas = canvas;
      if (!toy_c.config.empty()) tc = nlohmann::json::parse(std::ifstream(toy_c.config)).get<ToyConfig>();
      write_toy_dataset(toy_c.out_dir, toy_count, std::min(toy_test, toy_count), toy_c.seed, tc);
      std::cout << "wrote " << toy_count << " samples to " << toy_c.out_dir << "\n";
    } else if (train->parsed()) {
      TrainConfig cfg = tr_c.config.empty() ? TrainConfig::toy() : load_train_config(tr_c.config);
      if (train->count("--seed")) cfg.seed = tr_c.seed;
      if (tr_c.deterministic) cfg.deterministic = true;
      std::unique_ptr<SampleSource> source;
      if (!data_manifest.empty()) {
        source = std::make_unique<ManifestDataset>(read_manifest_file(data_manifest), "train", cfg.hp.width,
                                                   cfg.hp.embed_dim);
      } else {
        ToyConfig tc;
        tc.canvas = cfg.hp.width;
        tc.embed_dim = cfg.hp.embed_dim;
        source = std::make_unique<ToySource>(make_toy_samples(train_toy_count, cfg.seed, tc), cfg.hp.width);
      }
      Trainer<float> trainer(cfg, *source);
      if (!resume.empty()) trainer.resume(resume);
      std::filesystem::create_directories(tr_c.out_dir);
      write_json(std::filesystem::path(tr_c.out_dir) / "config.json", nlohmann::json(cfg));
      std::ofstream log(std::filesystem::path(tr_c.out_dir) / "train_log.ndjson", std::ios::app);
      trainer.set_log(&log);
      trainer.set_dump_dir(tr_c.out_dir);
      trainer.run(tr_c.out_dir);
      std::cout << "finished at epoch " << trainer.epoch() << ", step " << trainer.step() << "; checkpoint in "
                << (std::filesystem::path(tr_c.out_dir) / "final").string() << "\n";
    } else if (generate->parsed()) {
      Service service;
      service.load_checkpoint(gen_c.checkpoint.empty() ? throw CLI::RequiredError("--checkpoint") : gen_c.checkpoint);
      if (!embeddings.empty()) service.set_embeddings(load_embeddings(embeddings));
      const int size = service.model_info()["resolution"].get<int>();
      cv::Mat base_mat = base_path.empty() ? mat_from_image(load_base("", size, gen_c.seed))
                                           : read_mat(base_path, cv::IMREAD_COLOR);
      GenerateRequest req;
      req.base_png = encode_png(base_mat);
      req.bbox = {0, 0, base_mat.cols, base_mat.rows};
      if (!bbox_text.empty()) {
        char sep;
        std::stringstream ss(bbox_text);
        ss >> req.bbox.x >> sep >> req.bbox.y >> sep >> req.bbox.w >> sep >> req.bbox.h;
        if (!ss) throw CLI::ValidationError("--bbox", "expected x,y,w,h");
      }
      if (embedding_row >= 0) {
        req.embedding_row = embedding_row;
      } else {
        req.attrs = parse_attrs(attrs_text);
      }
      req.seed = gen_c.seed;
      req.mode = parse_compose_mode(mode);
      req.return_debug = debug;
      const auto res = service.handle_generate(req);
      const std::filesystem::path out(gen_c.out_dir);
      std::filesystem::create_directories(out);
      auto dump = [](const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
        std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                 static_cast<std::streamsize>(bytes.size()));
      };
      dump(out / "composite.png", res.composite_png);
      dump(out / "crop.png", res.crop_png);
      dump(out / "mask.png", res.mask_png);
      for (std::size_t i = 0; i < res.switch_pngs.size(); ++i) {
        dump(out / ("switch_" + std::to_string(i) + ".png"), res.switch_pngs[i]);
      }
      std::cout << "wrote " << out.string() << "/composite.png (" << res.total_ms << " ms)\n";
    } else if (interp->parsed() || noise->parsed() || sweep->parsed()) {
      const Common& c = interp->parsed() ? ip_c : noise->parsed() ? ns_c : ss_c;
      auto gen = require_generator(c);
      const auto& hp = gen.hyperparams();
      const Tensor<float> b = load_base(base_path, hp.width, c.seed);
      Rng rng(c.seed);
      const Tensor<float> eps = rng.normal_tensor<float>({1, hp.code_dim});
      const Tensor<float> z = rng.normal_tensor<float>({1, hp.noise_dim});
      SweepResult r;
      std::string name;
      if (interp->parsed()) {
        r = run_interpolation(gen, b, toy_encode(parse_attrs(attrs_a), hp.embed_dim),
                              toy_encode(parse_attrs(attrs_b), hp.embed_dim), z, eps, steps);
        name = "interpolation";
      } else if (noise->parsed()) {
        r = run_noise_sweep(gen, b, toy_encode(parse_attrs(attrs_text), hp.embed_dim), eps, steps);
        name = "noise_sweep";
      } else {
        r = run_switch_sweep(gen, b, toy_encode(parse_attrs(attrs_text), hp.embed_dim), z, eps);
        name = "switch_sweep";
      }
      validate_metrics(r.metrics);
      r.write(c.out_dir, name);
      std::cout << r.metrics.dump() << "\n";
    } else if (stats->parsed()) {
      auto gen = require_generator(st_c);
      ToyConfig tc;
      tc.canvas = gen.hyperparams().width;
      tc.embed_dim = gen.hyperparams().embed_dim;
      const auto samples = make_toy_samples(stats_count, st_c.seed, tc);
      const auto ev = evaluate_toy(gen, samples, tc.palette, st_c.seed);
      nlohmann::json stats_json = ev.switch_vs_mask;
      validate_metrics(stats_json);
      write_json(std::filesystem::path(st_c.out_dir) / "switch_stats.json", stats_json);
      write_json(std::filesystem::path(st_c.out_dir) / "toy_evaluation.json", ev);
      std::cout << nlohmann::json(ev).dump() << "\n";
    } else if (serve->parsed()) {
      Service service;
      if (!sv_c.checkpoint.empty()) service.load_checkpoint(sv_c.checkpoint);
      if (!embeddings.empty()) service.set_embeddings(load_embeddings(embeddings));
      httplib::Server server;
      install_routes(server, service);
      std::cout << "listening on http://" << host << ":" << port << "\n" << std::flush;
      if (!server.listen(host, port)) {
        std::cerr << "could not bind " << host << ":" << port << "\n";
        return 1;
      }
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
