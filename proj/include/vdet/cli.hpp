#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "vdet/config.hpp"
#include "vdet/dataset.hpp"
#include "vdet/evalkit.hpp"
#include "vdet/model_io.hpp"
#include "vdet/overlay.hpp"

namespace vdet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace cli {

// Usage problems detected after argument parsing (bad method name, bad
// config file contents) map to exit code 2.
class UsageProblem : public Error {
 public:
  using Error::Error;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline RunConfig effective_config(const std::string& config_path, const std::vector<std::string>& sets) {
  try {
    RunConfig c;
    if (!config_path.empty()) {
      const auto bytes = read_file_bytes(config_path);
      c = apply_config_text(c, std::string(bytes.begin(), bytes.end()));
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    validate(c);
    return c;
  } catch (const ConfigError& e) {
    throw UsageProblem(e.what());
  }
}

struct SplitData {
  DatasetSplit split;
  std::vector<Image> images;
  std::vector<std::vector<GroundTruth>> gts;
};

inline std::vector<std::vector<GroundTruth>> gts_of(const DatasetTable& t) {
  std::vector<std::vector<GroundTruth>> out;
  for (const auto& r : t.rows) out.push_back(r.gts);
  return out;
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string detection_line(const Detection& d) {
  return class_name(d.class_id) + " " + fmt("%.6f", d.score) + " " + fmt("%.2f", d.box.x) + " " +
         fmt("%.2f", d.box.y) + " " + fmt("%.2f", d.box.w) + " " + fmt("%.2f", d.box.h);
}

inline int cmd_synth(const std::string& out_dir, std::size_t n, std::uint64_t seed, Streams s) {
  const auto table = synth_dataset(n, seed, SynthConfig{}, out_dir);
  s.out << "wrote " << table.size() << " images and " << (std::filesystem::path(out_dir) / "dataset.csv").string()
        << "\n";
  return kExitOk;
}

inline int cmd_train(const std::string& method, const std::string& data, const RunConfig& cfg,
                     const std::string& out_model, std::string log_path, Streams s) {
  if (method != kMethodRcnn && method != kMethodFasterRcnn) {
    throw UsageProblem("unknown method '" + method + "' (expected rcnn or faster-rcnn)");
  }
  if (log_path.empty()) log_path = out_model + ".log";
  const DatasetTable table = load_dataset(data);
  const DatasetSplit split = split_dataset(table, cfg.split);
  const auto images = load_images(split.train);
  const auto gts = gts_of(split.train);
  std::ofstream log_file(log_path, std::ios::trunc);
  if (!log_file) throw IoError("cannot open '" + log_path + "' for writing");
  const LogSink log = [&](const std::string& line) {
    s.err << line << "\n";
    log_file << line << "\n";
  };
  log(method + " training on " + std::to_string(images.size()) + " images");
  if (method == kMethodRcnn) {
    save_model(train_rcnn(images, gts, cfg.rcnn, log), cfg, out_model);
  } else {
    save_model(alternating_train(images, gts, cfg.frcnn, log), cfg, out_model);
  }
  log("saved " + out_model);
  if (!log_file) throw IoError("write failed for '" + log_path + "'");
  return kExitOk;
}

inline int cmd_detect(const std::string& model_path, const std::string& image_path, const std::string& dump_path,
                      const std::string& svg_path, Streams s) {
  const AnyDetector det = load_any_model(model_path);
  const Image img = decode_image(image_path);
  const auto dets = det.detect(img);
  std::string text;
  for (const auto& d : dets) text += detection_line(d) + "\n";
  s.out << text;
  if (!dump_path.empty()) write_file_bytes(dump_path, std::vector<unsigned char>(text.begin(), text.end()));
  if (!svg_path.empty()) {
    const std::string svg = detection_overlay_svg(img, dets);
    write_file_bytes(svg_path, std::vector<unsigned char>(svg.begin(), svg.end()));
  }
  return kExitOk;
}

// Rebuilds the model's seeded split and returns the requested part,
// checking that test images never appear in the training part.
inline DatasetTable eval_rows(const RunConfig& cfg, const std::string& data, const std::string& which) {
  const DatasetSplit split = split_dataset(load_dataset(data), cfg.split);
  if (which == "train") return split.train;
  if (which != "test") throw UsageProblem("--split must be train or test, got '" + which + "'");
  std::set<std::size_t> train(split.train_rows.begin(), split.train_rows.end());
  for (std::size_t r : split.test_rows) {
    if (train.count(r)) throw Error("split leakage: row " + std::to_string(r) + " is in both parts");
  }
  return split.test;
}

inline int cmd_eval(const std::string& model_path, const std::string& data, const std::string& which,
                    const std::string& out_dir, Streams s) {
  const AnyDetector det = load_any_model(model_path);
  const DatasetTable rows = eval_rows(det.config, data, which);
  const EvalReport r = evaluate([&](const Image& im) { return det.detect(im); }, load_images(rows), gts_of(rows),
                                det.config.eval);
  emit_report(r, det.config.eval, det.method, out_dir);
  s.out << report_text(r, det.config.eval, det.method) << timing_text(r);
  return kExitOk;
}

inline int cmd_bench(const std::string& path_a, const std::string& path_b, const std::string& data, Streams s) {
  std::string table = "method        map       mean_seconds_per_image\n";
  for (const auto& path : {path_a, path_b}) {
    const AnyDetector det = load_any_model(path);
    const DatasetTable rows = eval_rows(det.config, data, "test");
    const EvalReport r = evaluate([&](const Image& im) { return det.detect(im); }, load_images(rows), gts_of(rows),
                                  det.config.eval);
    char line[128];
    std::snprintf(line, sizeof line, "%-13s %.6f  %.9f\n", det.method.c_str(), r.map, r.mean_seconds);
    table += line;
  }
  s.out << table;
  return kExitOk;
}

}  // namespace cli

// Entry point of the `vdet` tool; args excludes the program name.
// Returns 0 on success, 1 on runtime or IO failure, 2 on usage errors.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"vdet: desk-scale vehicle detection with R-CNN and Faster R-CNN"};
  app.require_subcommand(1);

  std::string synth_out;
  std::size_t synth_n = 350;
  std::uint64_t synth_seed = 1;
  auto* synth = app.add_subcommand("synth", "generate a synthetic vehicle dataset");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--seed", synth_seed, "generator seed");

  std::string method, data, config_path, model_out, log_path;
  std::vector<std::string> sets;
  bool print_config = false;
  auto* train = app.add_subcommand("train", "train a detector on the training split");
  train->add_option("--method", method, "rcnn or faster-rcnn");
  train->add_option("--data", data, "dataset CSV");
  train->add_option("--config", config_path, "key = value config file");
  train->add_option("--set", sets, "override one config key (key=value), repeatable");
  train->add_option("--out", model_out, "model file to write");
  train->add_option("--log", log_path, "training log (default: <out>.log)");
  train->add_flag("--print-config", print_config, "print the effective config and exit");

  std::string model_path, image_path, dump_path, svg_path;
  auto* detect = app.add_subcommand("detect", "run a trained detector on one image");
  detect->add_option("--model", model_path, "model file")->required();
  detect->add_option("--image", image_path, "PPM image")->required();
  detect->add_option("--dump-boxes", dump_path, "also write the detection lines to this file");
  detect->add_option("--svg", svg_path, "write an annotated SVG overlay");

  std::string eval_model, eval_data, eval_split = "test", eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a model on its seeded split");
  eval->add_option("--model", eval_model, "model file")->required();
  eval->add_option("--data", eval_data, "dataset CSV")->required();
  eval->add_option("--split", eval_split, "train or test");
  eval->add_option("--out", eval_out, "report directory")->required();

  std::string model_a, model_b, bench_data;
  auto* bench = app.add_subcommand("bench", "compare two models on the test split");
  bench->add_option("--model-a", model_a, "first model")->required();
  bench->add_option("--model-b", model_b, "second model")->required();
  bench->add_option("--data", bench_data, "dataset CSV")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const cli::Streams s{out, err};
  try {
    if (*synth) return cli::cmd_synth(synth_out, synth_n, synth_seed, s);
    if (*train) {
      const RunConfig cfg = cli::effective_config(config_path, sets);
      if (print_config) {
        out << dump_config(cfg);
        return kExitOk;
      }
      if (method.empty() || data.empty() || model_out.empty()) {
        throw cli::UsageProblem("train needs --method, --data and --out");
      }
      return cli::cmd_train(method, data, cfg, model_out, log_path, s);
    }
    if (*detect) return cli::cmd_detect(model_path, image_path, dump_path, svg_path, s);
    if (*eval) return cli::cmd_eval(eval_model, eval_data, eval_split, eval_out, s);
    if (*bench) return cli::cmd_bench(model_a, model_b, bench_data, s);
  } catch (const cli::UsageProblem& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace vdet
