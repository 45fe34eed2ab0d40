#include "sapool/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "sapool/checkpoint.hpp"
#include "sapool/config.hpp"
#include "sapool/errors.hpp"
#include "sapool/gradcam.hpp"
#include "sapool/gradcheck.hpp"
#include "sapool/pruning.hpp"
#include "sapool/train.hpp"

namespace sapool {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<std::string> out;
};

struct Extra {
  std::string checkpoint;
  std::string image;
  std::string layer;
  std::optional<std::size_t> class_id;
  std::size_t batch = 1;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

RunConfig effective_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    require_file(c.config, "--config");
    cfg = load_config(c.config);
  }
  if (c.seed) cfg.run.seed = *c.seed;
  if (c.precision) cfg.run.precision = *c.precision;
  if (c.out) cfg.run.out = *c.out;
  return resolve(cfg);
}

void check_data_files(const RunConfig& cfg) {
  const auto& d = cfg.data;
  if (d.kind == DataKind::mnist) {
    require_file(d.train_images, "data.train_images");
    require_file(d.train_labels, "data.train_labels");
    require_file(d.test_images, "data.test_images");
    require_file(d.test_labels, "data.test_labels");
  } else if (d.kind == DataKind::cifar) {
    for (const auto& f : d.cifar_train) require_file(f, "data.cifar_train");
    require_file(d.cifar_test, "data.cifar_test");
  }
}

void check_test_files(const RunConfig& cfg) {
  const auto& d = cfg.data;
  if (d.kind == DataKind::mnist) {
    require_file(d.test_images, "data.test_images");
    require_file(d.test_labels, "data.test_labels");
  } else if (d.kind == DataKind::cifar) {
    require_file(d.cifar_test, "data.cifar_test");
  }
}

fs::path out_dir(const RunConfig& cfg) {
  fs::path p(cfg.run.out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create output directory " + p.string() + ": " + ec.message());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError(path.string() + ": cannot open for writing");
  f << text;
}

template <typename T>
TrainHooks<T> progress_hooks(std::ostream& err, const char* phase, std::size_t epochs) {
  TrainHooks<T> h;
  h.epoch_end = [&err, phase, epochs](const EpochRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu loss %.4f train_acc %.4f test_acc %.4f\n",
                  phase, r.epoch, epochs, r.train_loss, r.train_acc, r.test_acc);
    err << buf << std::flush;
  };
  return h;
}

template <typename T>
Backbone<T> build(const RunConfig& cfg) {
  RngState rng{cfg.run.seed, 0};
  return Backbone<T>(cfg.model, rng);
}

template <typename T>
Checkpoint load_weights(Backbone<T>& net, const std::string& path) {
  require_file(path, "--checkpoint");
  Checkpoint ck = read_checkpoint(path);
  load_into(ck, net, path);
  return ck;
}

template <typename T>
int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  check_data_files(cfg);
  const fs::path dir = out_dir(cfg);
  const Dataset tr = load_train_set(cfg.data), te = load_test_set(cfg.data);
  Backbone<T> net = build<T>(cfg);
  const TrainReport report =
      train(net, tr, te, train_options(cfg), progress_hooks<T>(err, "train", cfg.optim.epochs));
  const std::string csv = report.to_csv();
  write_text(dir / "report.csv", csv);
  write_text(dir / "config.txt", to_text(cfg));
  save_checkpoint<T>((dir / "model.ckpt").string(), net);
  out << csv;
  return kExitOk;
}

template <typename T>
int cmd_eval(const RunConfig& cfg, const Extra& x, std::ostream& out) {
  check_test_files(cfg);
  Backbone<T> net = build<T>(cfg);
  load_weights(net, x.checkpoint);
  const double acc = evaluate(net, load_test_set(cfg.data), cfg.run.eval_batch);
  char buf[64];
  std::snprintf(buf, sizeof buf, "test_acc,%.6f\n", acc);
  out << buf;
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  auto rows = gradcheck_ops(cfg.run.seed);
  auto layers = gradcheck_layers(cfg.model, cfg.run.seed);
  rows.insert(rows.end(), layers.begin(), layers.end());
  out << format_gradcheck(rows);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.pass;
  if (failed) {
    throw NumericError("gradient check failed for " + std::to_string(failed) + " of " +
                       std::to_string(rows.size()) + " rows");
  }
  return kExitOk;
}

template <typename T>
int cmd_flops(const RunConfig& cfg, const Extra& x, std::ostream& out) {
  Backbone<T> net = build<T>(cfg);
  KeepFraction keep;
  std::shared_ptr<PruneState<T>> masks;
  if (!x.checkpoint.empty()) {
    const Checkpoint ck = load_weights(net, x.checkpoint);
    const auto stored = checkpoint_masks(ck);
    if (!stored.empty()) {
      masks = std::make_shared<PruneState<T>>(net.prunable_weights(), cfg.prune.prune);
      for (const auto& [name, m] : stored) masks->set_mask(name, m);
      keep = [masks](const std::string& w) { return masks->keep_fraction(w); };
    }
  }
  const auto& m = cfg.model;
  out << count_flops(net, Shape{x.batch, m.in_channels, m.height, m.width}, keep).to_csv();
  return kExitOk;
}

template <typename T>
int cmd_heatmap(const RunConfig& cfg, const Extra& x, std::ostream& out) {
  require_file(x.image, "--image");
  Backbone<T> net = build<T>(cfg);
  load_weights(net, x.checkpoint);
  Tensor<float> img = read_pnm(x.image);
  const auto& m = cfg.model;
  if (cfg.data.kind == DataKind::mnist && cfg.data.pad > 0) {
    Dataset one;
    one.images = Tensor<float>(Shape{1, img.dim(0), img.dim(1), img.dim(2)},
                               std::vector<float>(img.data().begin(), img.data().end()));
    one.labels = {0};
    one = pad_images(one, cfg.data.pad);
    img = Tensor<float>(Shape{img.dim(0), one.height(), one.width()},
                        std::vector<float>(one.images.data().begin(), one.images.data().end()));
  }
  if (img.dim(0) != m.in_channels || img.dim(1) != m.height || img.dim(2) != m.width) {
    throw DimensionError(x.image + ": image " + shape_str(img.shape()) + " does not match the model input [" +
                         std::to_string(m.in_channels) + "," + std::to_string(m.height) + "," +
                         std::to_string(m.width) + "]");
  }
  const auto [mean, stddev] = data_normalization(cfg.data);
  Tensor<T> batch(Shape{1, m.in_channels, m.height, m.width});
  const std::size_t plane = m.height * m.width;
  for (std::size_t c = 0; c < m.in_channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      batch[c * plane + i] = static_cast<T>((img[c * plane + i] - mean[c]) / stddev[c]);

  std::size_t cls;
  if (x.class_id) {
    cls = *x.class_id;
  } else {
    Tape<T> tape(TapeOptions{false, false});
    cls = static_cast<std::size_t>(argmax_rows(net.forward(tape, Var<T>(batch), Mode::eval).value())[0]);
  }
  std::vector<std::string> layers;
  if (x.layer.empty()) layers = net.pool_site_ids();
  else layers.push_back(x.layer);
  const fs::path dir = out_dir(cfg);
  for (const auto& id : layers) {
    const Tensor<float> map = gradcam_heatmap(net, batch, cls, id);
    const fs::path file = dir / ("heatmap_" + id + ".pgm");
    write_pgm(file.string(), map);
    out << id << "," << cls << "," << file.string() << "\n";
  }
  return kExitOk;
}

template <typename T>
int cmd_prune_finetune(const RunConfig& cfg, const Extra& x, std::ostream& out, std::ostream& err) {
  check_data_files(cfg);
  Backbone<T> net = build<T>(cfg);
  const Checkpoint ck = load_weights(net, x.checkpoint);
  if (!checkpoint_masks(ck).empty()) {
    throw ConfigError("--checkpoint " + x.checkpoint +
                      " already carries pruning masks; prune-finetune starts from a dense pretrained model");
  }
  const fs::path dir = out_dir(cfg);
  const Dataset tr = load_train_set(cfg.data), te = load_test_set(cfg.data);
  PruneState<T> state(net.prunable_weights(), cfg.prune.prune);
  TrainOptions opts = train_options(cfg);
  opts.optim.epochs = cfg.prune.epochs;
  opts.optim.lr = cfg.prune.lr;
  auto hooks = progress_hooks<T>(err, "prune", cfg.prune.epochs);
  const TrainReport report = prune_finetune(net, state, tr, te, opts, hooks);
  const std::string csv = report.to_csv();
  write_text(dir / "prune_report.csv", csv);
  write_text(dir / "config.txt", to_text(cfg));
  save_checkpoint<T>((dir / "pruned.ckpt").string(), net, &state);
  for (const auto& l : state.layers()) {
    err << "mask " << l.name << " active " << l.active() << "/" << l.channels << "\n";
  }
  out << csv;
  return kExitOk;
}

template <typename T>
int dispatch(const std::string& cmd, const RunConfig& cfg, const Extra& x, std::ostream& out,
             std::ostream& err) {
  if (cmd == "train") return cmd_train<T>(cfg, out, err);
  if (cmd == "eval") return cmd_eval<T>(cfg, x, out);
  if (cmd == "flops") return cmd_flops<T>(cfg, x, out);
  if (cmd == "heatmap") return cmd_heatmap<T>(cfg, x, out);
  if (cmd == "prune-finetune") return cmd_prune_finetune<T>(cfg, x, out, err);
  throw ConfigError("unknown subcommand " + cmd);
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return kExitConfig;
    case ErrorCategory::format: return kExitFormat;
    case ErrorCategory::dimension: return kExitDimension;
    case ErrorCategory::schedule: return kExitSchedule;
    case ErrorCategory::numeric: return kExitNumeric;
    case ErrorCategory::contract: return kExitContract;
  }
  return kExitContract;
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-attentive pooling toolkit", "sapool"};
  app.require_subcommand(1);
  Common common;
  Extra extra;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Run configuration (key = value with [sections])");
    sub->add_option("--seed", common.seed, "Override run.seed");
    sub->add_option("--precision", common.precision, "Override run.precision")
        ->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--out", common.out, "Override run.out (output directory)");
  };
  auto* train = app.add_subcommand("train", "Train a backbone; writes report.csv, model.ckpt, config.txt");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--checkpoint", extra.checkpoint, "Model checkpoint")->required();
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and layer (f64)");
  add_common(grad);
  auto* flops = app.add_subcommand("flops", "Per-layer FLOPs and activation-memory CSV");
  add_common(flops);
  flops->add_option("--checkpoint", extra.checkpoint, "Checkpoint whose masks give effective FLOPs");
  flops->add_option("--batch", extra.batch, "Batch size for the profile")->check(CLI::PositiveNumber);
  auto* heat = app.add_subcommand("heatmap", "Grad-CAM heatmaps at pooling-layer inputs as PGM");
  add_common(heat);
  heat->add_option("--checkpoint", extra.checkpoint, "Model checkpoint")->required();
  heat->add_option("--image", extra.image, "Input image (binary PGM or PPM)")->required();
  heat->add_option("--layer", extra.layer, "Pooling site id (pool0, pool1, ...); all sites if omitted");
  heat->add_option("--class", extra.class_id, "Target class; the predicted class if omitted");
  auto* prune = app.add_subcommand("prune-finetune", "Channel-prune stage 1 of a pretrained checkpoint");
  add_common(prune);
  prune->add_option("--checkpoint", extra.checkpoint, "Dense pretrained checkpoint")->required();

  std::vector<const char*> argv{"sapool"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: config: " << one_line(e.what()) << "\n";
    return kExitConfig;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg = effective_config(common);
    if (cmd == "gradcheck") return cmd_gradcheck(cfg, out);
    return cfg.run.precision == "f64" ? dispatch<double>(cmd, cfg, extra, out, err)
                                      : dispatch<float>(cmd, cfg, extra, out, err);
  } catch (const Error& e) {
    err << "error: " << category_name(e.category()) << ": " << one_line(e.what()) << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "error: contract: " << one_line(e.what()) << "\n";
    return kExitContract;
  }
}

}  // namespace sapool
