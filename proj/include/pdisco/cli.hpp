#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pdisco/data_synth.hpp"
#include "pdisco/eval.hpp"
#include "pdisco/trainer.hpp"
#include "pdisco/viz.hpp"

namespace pdisco::cli {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline long parse_int(const std::string& name, const std::string& v) {
  try {
    std::size_t used = 0;
    const long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("--" + name + " expects an integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& name, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("--" + name + " expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& name, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw UsageError("--" + name + " expects a boolean, got '" + v + "'");
}

}  // namespace detail

// Table-driven option set with a flat key=value config file underneath;
// precedence is command-line flag > config file > built-in default.
class Command {
 public:
  Command(std::string name, std::string summary)
      : name_(std::move(name)), summary_(std::move(summary)) {
    add_value("config", "", "flat key=value config file (keys = flag names)",
              [](const std::string&) {});
    add_flag("dump-config", "print the resolved configuration and exit",
             [](const std::string&) {});
  }

  void add_value(const std::string& key, const std::string& default_text,
                 const std::string& help, std::function<void(const std::string&)> apply,
                 bool required = false) {
    options_.push_back(Option{key, default_text, help, true, required, std::move(apply)});
  }

  void add_flag(const std::string& key, const std::string& help,
                std::function<void(const std::string&)> apply) {
    options_.push_back(Option{key, "", help, false, false, std::move(apply)});
  }

  std::vector<std::string> option_names() const {
    std::vector<std::string> out;
    for (const Option& o : options_) out.push_back(o.key);
    return out;
  }

  std::string usage() const {
    std::ostringstream os;
    os << "pdisco " << name_ << ": " << summary_ << "\n\noptions:\n";
    for (const Option& o : options_) {
      os << "  --" << o.key << (o.takes_value ? " <value>" : "");
      if (!o.default_text.empty()) os << " (default " << o.default_text << ")";
      if (o.required) os << " (required)";
      os << "\n      " << o.help << "\n";
    }
    return os.str();
  }

  // Parses argv, merges the optional config file, applies values in
  // precedence order, and runs the body. --dump-config short-circuits.
  int run(const std::vector<std::string>& args, const std::function<int()>& body) const {
    std::map<std::string, std::string> from_flags;
    for (std::size_t i = 0; i < args.size(); ++i) {
      std::string arg = args[i];
      if (arg == "--help" || arg == "-h") {
        std::cout << usage();
        return 0;
      }
      if (arg.rfind("--", 0) != 0)
        throw UsageError("unexpected argument '" + arg + "' (options start with --)");
      arg = arg.substr(2);
      std::string value;
      bool has_value = false;
      if (const std::size_t eq = arg.find('='); eq != std::string::npos) {
        value = arg.substr(eq + 1);
        arg = arg.substr(0, eq);
        has_value = true;
      }
      const Option* opt = find(arg);
      if (!opt) throw UsageError("unknown option --" + arg + " for 'pdisco " + name_ + "'");
      if (opt->takes_value && !has_value) {
        if (i + 1 >= args.size()) throw UsageError("--" + arg + " expects a value");
        value = args[++i];
      }
      if (!opt->takes_value) {
        if (has_value) throw UsageError("--" + arg + " does not take a value");
        value = "1";
      }
      from_flags[arg] = value;
    }

    std::map<std::string, std::string> from_config;
    if (auto it = from_flags.find("config"); it != from_flags.end())
      from_config = load_config(it->second);

    for (const Option& o : options_) {
      if (o.key == "config" || o.key == "dump-config") continue;
      auto fit = from_flags.find(o.key);
      auto cit = from_config.find(o.key);
      if (fit != from_flags.end())
        o.apply(fit->second);
      else if (cit != from_config.end())
        o.apply(cit->second);
      else if (o.required)
        throw UsageError("--" + o.key + " is required for 'pdisco " + name_ + "'");
    }

    if (from_flags.count("dump-config")) {
      for (const Option& o : options_) {
        if (o.key == "config" || o.key == "dump-config") continue;
        auto fit = from_flags.find(o.key);
        auto cit = from_config.find(o.key);
        const std::string value = fit != from_flags.end()
                                      ? fit->second
                                      : (cit != from_config.end() ? cit->second : o.default_text);
        std::cout << o.key << "=" << value << "\n";
      }
      return 0;
    }
    return body();
  }

 private:
  struct Option {
    std::string key, default_text, help;
    bool takes_value = true;
    bool required = false;
    std::function<void(const std::string&)> apply;
  };

  std::string name_, summary_;
  std::vector<Option> options_;

  const Option* find(const std::string& key) const {
    for (const Option& o : options_)
      if (o.key == key) return &o;
    return nullptr;
  }

  std::map<std::string, std::string> load_config(const std::string& path) const {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::map<std::string, std::string> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      std::size_t begin = line.find_first_not_of(" \t");
      if (begin == std::string::npos) continue;
      std::size_t end = line.find_last_not_of(" \t");
      line = line.substr(begin, end - begin + 1);
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
      std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
      while (!value.empty() && (value.front() == ' ' || value.front() == '\t'))
        value.erase(value.begin());
      const Option* opt = find(key);
      if (!opt || key == "config" || key == "dump-config")
        throw UsageError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
      out[key] = value;
    }
    return out;
  }
};

// ---- synth ----

inline int cmd_synth(const std::vector<std::string>& args) {
  SynthSpec spec;
  std::string out_dir;
  Command cmd("synth", "generate a synthetic part-structured dataset");
  using detail::parse_int;
  cmd.add_value("out", "", "output dataset directory",
                [&](const std::string& v) { out_dir = v; }, true);
  cmd.add_value("classes", "8", "number of classes",
                [&](const std::string& v) { spec.classes = static_cast<int>(parse_int("classes", v)); });
  cmd.add_value("parts", "4", "parts per object",
                [&](const std::string& v) { spec.parts_per_object = static_cast<int>(parse_int("parts", v)); });
  cmd.add_value("images-per-class", "250", "images per class", [&](const std::string& v) {
    spec.images_per_class = static_cast<int>(parse_int("images-per-class", v));
  });
  cmd.add_value("side", "64", "image side in pixels",
                [&](const std::string& v) { spec.image_side = static_cast<int>(parse_int("side", v)); });
  cmd.add_value("seed", "42", "generator seed", [&](const std::string& v) {
    spec.seed = static_cast<std::uint64_t>(parse_int("seed", v));
  });
  cmd.add_flag("multi-instance", "2-3 object instances per image",
               [&](const std::string&) { spec.multi_instance = true; });
  cmd.add_flag("irregular-parts", "elongated and crescent part shapes",
               [&](const std::string&) { spec.irregular_parts = true; });

  return cmd.run(args, [&]() {
    generate(spec, out_dir);
    const Dataset ds = load(out_dir);
    std::cout << "wrote " << ds.samples.size() << " samples to " << out_dir << " (train "
              << ds.split_indices(Split::train).size() << ", val "
              << ds.split_indices(Split::val).size() << ", test "
              << ds.split_indices(Split::test).size() << ")\n";
    return 0;
  });
}

// ---- train ----

inline int cmd_train(const std::vector<std::string>& args) {
  std::string data_dir, out_dir, resume_path;
  ModelConfig head_cfg;
  head_cfg.num_parts = 4;
  BackboneConfig bb_cfg;
  TrainConfig train_cfg;

  Command cmd("train", "train the part-discovery model on a dataset");
  using detail::parse_int;
  using detail::parse_real;
  cmd.add_value("data", "", "dataset directory", [&](const std::string& v) { data_dir = v; },
                true);
  cmd.add_value("out", "", "run directory for checkpoints and history",
                [&](const std::string& v) { out_dir = v; }, true);
  cmd.add_value("k", "4", "number of foreground parts", [&](const std::string& v) {
    head_cfg.num_parts = static_cast<int>(parse_int("k", v));
  });
  cmd.add_value("epochs", "28", "training epochs", [&](const std::string& v) {
    train_cfg.epochs = static_cast<int>(parse_int("epochs", v));
  });
  cmd.add_value("batch", "16", "batch size", [&](const std::string& v) {
    train_cfg.batch_size = static_cast<int>(parse_int("batch", v));
  });
  cmd.add_value("seed", "42", "training seed", [&](const std::string& v) {
    train_cfg.seed = static_cast<std::uint64_t>(parse_int("seed", v));
  });
  cmd.add_value("patch", "8", "backbone patch size", [&](const std::string& v) {
    bb_cfg.patch_size = static_cast<int>(parse_int("patch", v));
  });
  cmd.add_value("depth", "2", "transformer depth", [&](const std::string& v) {
    bb_cfg.depth = static_cast<int>(parse_int("depth", v));
  });
  cmd.add_value("heads", "4", "attention heads", [&](const std::string& v) {
    bb_cfg.heads = static_cast<int>(parse_int("heads", v));
  });
  cmd.add_value("feat-dim", "64", "feature dimension", [&](const std::string& v) {
    bb_cfg.feat_dim = static_cast<int>(parse_int("feat-dim", v));
  });
  cmd.add_value("registers", "4", "register tokens", [&](const std::string& v) {
    bb_cfg.register_tokens = static_cast<int>(parse_int("registers", v));
  });
  cmd.add_value("train-mode", "full", "tokens_only | full | frozen",
                [&](const std::string& v) { bb_cfg.train_mode = train_mode_from_string(v); });
  cmd.add_value("lr-backbone", "1e-06", "backbone token group learning rate",
                [&](const std::string& v) { train_cfg.lr_backbone_tokens = parse_real("lr-backbone", v); });
  cmd.add_value("lr-prototypes", "0.001", "prototype group learning rate",
                [&](const std::string& v) { train_cfg.lr_prototypes = parse_real("lr-prototypes", v); });
  cmd.add_value("lr-head", "0.01", "modulation + classifier learning rate",
                [&](const std::string& v) {
                  train_cfg.lr_modulation_classifier = parse_real("lr-head", v);
                });
  cmd.add_value("clip", "2", "gradient norm clip", [&](const std::string& v) {
    train_cfg.grad_clip_norm = parse_real("clip", v);
  });
  cmd.add_value("dropout", "0.3", "part dropout rate", [&](const std::string& v) {
    train_cfg.part_dropout = parse_real("dropout", v);
  });
  cmd.add_value("tau", "1", "gumbel softmax temperature", [&](const std::string& v) {
    head_cfg.gumbel_temperature = parse_real("tau", v);
  });
  cmd.add_value("threads", "0", "worker threads (0 = hardware)", [&](const std::string& v) {
    train_cfg.threads = static_cast<int>(parse_int("threads", v));
  });
  cmd.add_value("resume", "", "checkpoint to resume from",
                [&](const std::string& v) { resume_path = v; });
  cmd.add_flag("no-tv", "disable the total variation loss",
               [&](const std::string&) { train_cfg.weights.total_variation = 0.0; });
  cmd.add_flag("no-entropy", "disable the entropy loss",
               [&](const std::string&) { train_cfg.weights.entropy = 0.0; });
  cmd.add_flag("no-equiv", "disable the equivariance loss",
               [&](const std::string&) { train_cfg.weights.equivariance = 0.0; });
  cmd.add_flag("no-orth", "disable the orthogonality loss",
               [&](const std::string&) { train_cfg.weights.orthogonality = 0.0; });
  cmd.add_flag("no-presence-fg", "disable the foreground presence loss",
               [&](const std::string&) { train_cfg.weights.presence_fg = 0.0; });
  cmd.add_flag("no-presence-bg", "disable the background presence loss",
               [&](const std::string&) { train_cfg.weights.presence_bg = 0.0; });
  cmd.add_flag("no-gumbel", "replace gumbel softmax with plain softmax",
               [&](const std::string&) { head_cfg.gumbel_enabled = false; });
  cmd.add_flag("no-part-dropout", "disable part dropout",
               [&](const std::string&) { train_cfg.part_dropout = 0.0; });
  cmd.add_flag("no-modulation", "disable the per-part layer-norm modulation",
               [&](const std::string&) { head_cfg.modulation_enabled = false; });

  return cmd.run(args, [&]() {
    const Dataset ds = load(data_dir);
    if (!resume_path.empty()) {
      Checkpoint ck = load_checkpoint(resume_path);
      FitResult result =
          fit(ds, ck.model, ck.train_cfg, out_dir, &ck.adam, ck.next_epoch, ck.best_val);
      std::cout << "resumed at epoch " << ck.next_epoch << "; best val top1 " << result.best_val
                << "\n";
      return 0;
    }
    head_cfg.num_classes = ds.num_classes;
    head_cfg.part_dropout_rate = train_cfg.part_dropout;
    head_cfg.feat_dim = bb_cfg.feat_dim;
    if (ds.image_side % bb_cfg.patch_size != 0)
      throw ConfigError("dataset side " + std::to_string(ds.image_side) +
                        " is not divisible by patch size " + std::to_string(bb_cfg.patch_size));
    head_cfg.grid_h = head_cfg.grid_w = ds.image_side / bb_cfg.patch_size;
    Model model = Model::init(head_cfg, bb_cfg, train_cfg.seed);
    FitResult result = fit(ds, model, train_cfg, out_dir);
    std::cout << "trained " << train_cfg.epochs << " epochs; best val top1 " << result.best_val
              << "; best checkpoint " << result.best_path << "\n";
    return 0;
  });
}

// ---- eval ----

inline int cmd_eval(const std::vector<std::string>& args) {
  std::string data_dir, ckpt_path, report_path, split_name = "test", metric_list;
  EvalOptions opts;

  Command cmd("eval", "evaluate a checkpoint on a dataset split");
  cmd.add_value("data", "", "dataset directory", [&](const std::string& v) { data_dir = v; },
                true);
  cmd.add_value("ckpt", "", "checkpoint file", [&](const std::string& v) { ckpt_path = v; },
                true);
  cmd.add_value("split", "test", "train | val | test",
                [&](const std::string& v) { split_name = v; });
  cmd.add_value("out", "", "also write the report to this file",
                [&](const std::string& v) { report_path = v; });
  cmd.add_value("metrics", "", "comma-separated subset (top1,nmi,ari,kp,fg_miou,attention_entropy)",
                [&](const std::string& v) { metric_list = v; });
  cmd.add_value("threads", "0", "worker threads (0 = hardware)", [&](const std::string& v) {
    opts.threads = static_cast<int>(detail::parse_int("threads", v));
  });
  cmd.add_flag("inject-gt", "use ground truth as the prediction (wiring check)",
               [&](const std::string&) { opts.inject_gt = true; });

  return cmd.run(args, [&]() {
    if (!metric_list.empty()) {
      std::stringstream ss(metric_list);
      std::string item;
      const std::set<std::string> known = {"top1", "nmi", "ari", "kp", "fg_miou",
                                           "attention_entropy"};
      while (std::getline(ss, item, ',')) {
        if (!known.count(item)) throw UsageError("unknown metric '" + item + "'");
        opts.metrics.insert(item);
      }
    }
    Checkpoint ck = load_checkpoint(ckpt_path);
    const Dataset ds = load(data_dir);
    const EvalReport report = evaluate(ck.model, ds, split_from_string(split_name), opts);
    std::cout << report.to_text();
    if (!report_path.empty()) {
      std::ofstream out(report_path, std::ios::trunc);
      if (!out) throw IoError("cannot write report to " + report_path);
      out << report.to_text();
    }
    return 0;
  });
}

// ---- viz ----

inline int cmd_viz(const std::vector<std::string>& args) {
  std::string ckpt_path, image_path, out_path, soft_dir;

  Command cmd("viz", "render a part-assignment overlay for one image");
  cmd.add_value("ckpt", "", "checkpoint file", [&](const std::string& v) { ckpt_path = v; },
                true);
  cmd.add_value("image", "", "input image (8-bit RGB PNG)",
                [&](const std::string& v) { image_path = v; }, true);
  cmd.add_value("out", "", "output overlay PNG", [&](const std::string& v) { out_path = v; },
                true);
  cmd.add_value("soft-dir", "", "directory for per-part grayscale soft maps",
                [&](const std::string& v) { soft_dir = v; });

  return cmd.run(args, [&]() {
    Checkpoint ck = load_checkpoint(ckpt_path);
    const ImageU8 image = read_png(image_path);
    const ModelConfig& hc = ck.model.head_cfg;
    const int expect_h = hc.grid_h * ck.model.backbone_cfg.patch_size;
    const int expect_w = hc.grid_w * ck.model.backbone_cfg.patch_size;
    if (image.height != expect_h || image.width != expect_w)
      throw ConfigError("checkpoint expects a " + std::to_string(expect_w) + "x" +
                        std::to_string(expect_h) + " image, got " + std::to_string(image.width) +
                        "x" + std::to_string(image.height));
    if (image.channels != 3) throw FormatError(image_path + ": overlay needs an RGB image");

    Tensor tensor({3, image.height, image.width});
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        for (int c = 0; c < 3; ++c) tensor.at3(c, y, x) = image.at(y, x, c) / 255.0;

    ModelConfig eval_cfg = hc;
    eval_cfg.gumbel_enabled = false;
    const Tensor feats = embed(tensor, ck.model.backbone, ck.model.backbone_cfg);
    RandomSource rng(0);
    const HeadForward fwd = head_forward(feats, ck.model.head, eval_cfg, rng, false);

    write_png(out_path, render_overlay(image, part_assignment(fwd.attention)));
    if (!soft_dir.empty()) {
      std::filesystem::create_directories(soft_dir);
      for (int k = 0; k < hc.channels(); ++k) {
        const std::string name = k == hc.num_parts ? "background" : "part_" + std::to_string(k + 1);
        write_png(soft_dir + "/" + name + ".png",
                  render_soft_map(fwd.attention, k, image.height, image.width));
      }
    }
    std::cout << "wrote " << out_path << "\n";
    return 0;
  });
}

// ---- dispatch ----

inline int usage_root(std::ostream& os) {
  os << "usage: pdisco <synth|train|eval|viz> [options]\n"
        "  synth  generate a synthetic part-structured dataset\n"
        "  train  train the part-discovery model\n"
        "  eval   compute the metric suite for a checkpoint\n"
        "  viz    render part-assignment overlays\n"
        "run 'pdisco <command> --help' for options; PDISCO_THREADS caps parallelism\n";
  return 2;
}

inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 2; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    if (argc < 2) return usage_root(std::cerr);
    const std::string command = argv[1];
    if (command == "--help" || command == "-h") {
      usage_root(std::cout);
      return 0;
    }
    if (command == "synth") return cmd_synth(args);
    if (command == "train") return cmd_train(args);
    if (command == "eval") return cmd_eval(args);
    if (command == "viz") return cmd_viz(args);
    std::cerr << "pdisco: unknown command '" << command << "'\n";
    return usage_root(std::cerr);
  } catch (const UsageError& e) {
    std::cerr << "pdisco: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "pdisco: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pdisco: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace pdisco::cli
