#include "sapool/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "sapool/errors.hpp"

namespace sapool {

std::string_view to_string(DataKind k) {
  switch (k) {
    case DataKind::mnist: return "mnist";
    case DataKind::cifar: return "cifar";
    case DataKind::synthetic: return "synthetic";
  }
  return "?";
}

DataKind parse_data_kind(std::string_view s) {
  if (s == "mnist" || s == "idx") return DataKind::mnist;
  if (s == "cifar") return DataKind::cifar;
  if (s == "synthetic") return DataKind::synthetic;
  throw ConfigError("unknown data kind '" + std::string(s) + "' (expected mnist, cifar or synthetic)");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(trim(std::string_view(v).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_f64(const std::string& v) {
  double x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt(bool b) { return b ? "true" : "false"; }

template <typename V, typename F>
std::string join(const std::vector<V>& xs, F f) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + f(xs[i]);
  return s;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_FIELD(sec, name, expr)                                               \
  Field{sec, name, [](const RunConfig& c) { return std::to_string(c.expr); },     \
        [](RunConfig& c, const std::string& v) { c.expr = static_cast<std::size_t>(to_u64(v)); }}
#define U64_FIELD(sec, name, expr)                                            \
  Field{sec, name, [](const RunConfig& c) { return std::to_string(c.expr); }, \
        [](RunConfig& c, const std::string& v) { c.expr = to_u64(v); }}
#define REAL_FIELD(sec, name, expr)                                   \
  Field{sec, name, [](const RunConfig& c) { return fmt(c.expr); },    \
        [](RunConfig& c, const std::string& v) { c.expr = to_f64(v); }}
#define BOOL_FIELD(sec, name, expr)                                    \
  Field{sec, name, [](const RunConfig& c) { return fmt(c.expr); },     \
        [](RunConfig& c, const std::string& v) { c.expr = to_bool(v); }}
#define STR_FIELD(sec, name, expr)                             \
  Field{sec, name, [](const RunConfig& c) { return c.expr; }, \
        [](RunConfig& c, const std::string& v) { c.expr = v; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"model", "arch", [](const RunConfig& c) { return std::string(to_string(c.model.arch)); },
            [](RunConfig& c, const std::string& v) { c.model.arch = parse_arch(v); }},
      Field{"model", "pool", [](const RunConfig& c) { return std::string(to_string(c.model.pool)); },
            [](RunConfig& c, const std::string& v) { c.model.pool = parse_pool_method(v); }},
      Field{"model", "placement",
            [](const RunConfig& c) {
              return c.placement_explicit ? std::string(to_string(c.model.placement)) : "auto";
            },
            [](RunConfig& c, const std::string& v) {
              c.placement_explicit = v != "auto";
              if (c.placement_explicit) c.model.placement = parse_placement(v);
            }},
      SIZE_FIELD("model", "s1", model.s1),
      REAL_FIELD("model", "width_mult", model.width_mult),
      Field{"model", "patch_sizes",
            [](const RunConfig& c) {
              return join(c.model.patch_sizes, [](std::size_t x) { return std::to_string(x); });
            },
            [](RunConfig& c, const std::string& v) {
              c.model.patch_sizes.clear();
              for (const auto& s : split_list(v)) c.model.patch_sizes.push_back(to_u64(s));
            }},
      Field{"model", "channel_ratios",
            [](const RunConfig& c) {
              return join(c.model.channel_ratios, [](double x) { return fmt(x); });
            },
            [](RunConfig& c, const std::string& v) {
              c.model.channel_ratios.clear();
              for (const auto& s : split_list(v)) c.model.channel_ratios.push_back(to_f64(s));
            }},
      SIZE_FIELD("model", "num_heads", model.num_heads),
      BOOL_FIELD("model", "pre_ln", model.pre_ln),
      BOOL_FIELD("ablation", "bn1", model.ablation.bn1),
      BOOL_FIELD("ablation", "bn2", model.ablation.bn2),
      BOOL_FIELD("ablation", "exp", model.ablation.exp),
      BOOL_FIELD("ablation", "pe", model.ablation.pe),
      BOOL_FIELD("ablation", "sigmoid", model.ablation.sigmoid),
      Field{"data", "kind", [](const RunConfig& c) { return std::string(to_string(c.data.kind)); },
            [](RunConfig& c, const std::string& v) { c.data.kind = parse_data_kind(v); }},
      STR_FIELD("data", "train_images", data.train_images),
      STR_FIELD("data", "train_labels", data.train_labels),
      STR_FIELD("data", "test_images", data.test_images),
      STR_FIELD("data", "test_labels", data.test_labels),
      Field{"data", "cifar_train",
            [](const RunConfig& c) { return join(c.data.cifar_train, [](const std::string& s) { return s; }); },
            [](RunConfig& c, const std::string& v) { c.data.cifar_train = split_list(v); }},
      STR_FIELD("data", "cifar_test", data.cifar_test),
      SIZE_FIELD("data", "train_limit", data.train_limit),
      SIZE_FIELD("data", "test_limit", data.test_limit),
      SIZE_FIELD("data", "pad", data.pad),
      SIZE_FIELD("data", "synth_train", data.synth_train),
      SIZE_FIELD("data", "synth_test", data.synth_test),
      U64_FIELD("data", "synth_seed", data.synth_seed),
      BOOL_FIELD("data", "flip", data.flip),
      SIZE_FIELD("data", "crop_pad", data.crop_pad),
      Field{"data", "mean",
            [](const RunConfig& c) { return join(c.data.mean, [](double x) { return fmt(x); }); },
            [](RunConfig& c, const std::string& v) {
              c.data.mean.clear();
              for (const auto& s : split_list(v)) c.data.mean.push_back(to_f64(s));
            }},
      Field{"data", "stddev",
            [](const RunConfig& c) { return join(c.data.stddev, [](double x) { return fmt(x); }); },
            [](RunConfig& c, const std::string& v) {
              c.data.stddev.clear();
              for (const auto& s : split_list(v)) c.data.stddev.push_back(to_f64(s));
            }},
      REAL_FIELD("optim", "lr", optim.lr),
      REAL_FIELD("optim", "momentum", optim.momentum),
      REAL_FIELD("optim", "weight_decay", optim.weight_decay),
      SIZE_FIELD("optim", "epochs", optim.epochs),
      SIZE_FIELD("optim", "batch_size", optim.batch_size),
      BOOL_FIELD("optim", "cosine", optim.cosine),
      REAL_FIELD("prune", "target_ratio", prune.prune.target_ratio),
      REAL_FIELD("prune", "rate_start", prune.prune.rate_start),
      REAL_FIELD("prune", "rate_end", prune.prune.rate_end),
      REAL_FIELD("prune", "momentum", prune.prune.momentum),
      Field{"prune", "regrow", [](const RunConfig& c) { return to_string(c.prune.prune.regrow); },
            [](RunConfig& c, const std::string& v) { c.prune.prune.regrow = parse_regrow_policy(v); }},
      SIZE_FIELD("prune", "epochs", prune.epochs),
      REAL_FIELD("prune", "lr", prune.lr),
      U64_FIELD("run", "seed", run.seed),
      STR_FIELD("run", "precision", run.precision),
      STR_FIELD("run", "out", run.out),
      BOOL_FIELD("run", "wall_clock", run.wall_clock),
      BOOL_FIELD("run", "debug", run.debug),
      SIZE_FIELD("run", "eval_batch", run.eval_batch),
  };
  return table;
}

#undef SIZE_FIELD
#undef U64_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string s = trim(std::string_view(line).substr(0, hash));
    if (s.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + "unterminated section header '" + s + "'");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      bool known = false;
      for (const auto& f : fields()) known = known || section == f.section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + s + "'");
    if (section.empty()) throw ConfigError(where + "key outside any [section]");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    const std::string value = trim(std::string_view(s).substr(eq + 1));
    const Field* match = nullptr;
    for (const auto& f : fields())
      if (section == f.section && key == f.key) match = &f;
    if (!match) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    try {
      match->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + section + "." + key + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::string to_text(const RunConfig& c) {
  std::string out, section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      out += (section.empty() ? "[" : "\n[") + std::string(f.section) + "]\n";
      section = f.section;
    }
    out += std::string(f.key) + " = " + f.get(c) + "\n";
  }
  return out;
}

InputGeometry data_geometry(const DataConfig& d) {
  switch (d.kind) {
    case DataKind::mnist: return {1, 28 + 2 * d.pad, 28 + 2 * d.pad, 10};
    case DataKind::cifar: return {3, 32, 32, 10};
    case DataKind::synthetic: return {1, 32, 32, 2};
  }
  return {1, 32, 32, 10};
}

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

RunConfig resolve(RunConfig c) {
  const auto g = data_geometry(c.data);
  c.model.in_channels = g.channels;
  c.model.height = g.height;
  c.model.width = g.width;
  c.model.num_classes = g.classes;
  if (!c.placement_explicit) c.model.placement = default_placement(c.model.arch);

  check(c.model.s1 == 1 || c.model.s1 == 2 || c.model.s1 == 4,
        "model.s1 must be 1, 2 or 4, got " + std::to_string(c.model.s1));
  check(c.model.width_mult > 0.0 && std::isfinite(c.model.width_mult),
        "model.width_mult must be positive");
  check(c.model.num_heads >= 1, "model.num_heads must be at least 1");
  check(c.optim.lr >= 0.0 && std::isfinite(c.optim.lr), "optim.lr must be finite and >= 0");
  check(c.optim.momentum >= 0.0 && c.optim.momentum < 1.0, "optim.momentum must lie in [0,1)");
  check(c.optim.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  check(c.optim.epochs >= 1, "optim.epochs must be at least 1");
  check(c.optim.batch_size >= 1, "optim.batch_size must be at least 1");
  check(c.prune.prune.target_ratio >= 1.0 && std::isfinite(c.prune.prune.target_ratio),
        "prune.target_ratio must be >= 1");
  check(c.prune.prune.rate_start >= 0.0 && c.prune.prune.rate_end >= 0.0,
        "prune rates must be >= 0");
  check(c.prune.prune.rate_end <= c.prune.prune.rate_start,
        "prune.rate_end must not exceed prune.rate_start (the schedule is non-increasing)");
  check(c.prune.prune.momentum >= 0.0 && c.prune.prune.momentum < 1.0,
        "prune.momentum must lie in [0,1)");
  check(c.prune.epochs >= 1, "prune.epochs must be at least 1");
  check(c.prune.lr >= 0.0, "prune.lr must be >= 0");
  check(c.run.precision == "f32" || c.run.precision == "f64",
        "run.precision must be f32 or f64, got '" + c.run.precision + "'");
  check(c.run.eval_batch >= 1, "run.eval_batch must be at least 1");
  if (c.data.kind == DataKind::cifar) {
    check(!c.data.cifar_train.empty(), "data.cifar_train must list at least one batch file");
    check(!c.data.cifar_test.empty(), "data.cifar_test is required for cifar data");
  }
  if (c.data.kind == DataKind::synthetic) {
    check(c.data.synth_train >= 4 && c.data.synth_test >= 4,
          "synthetic splits need at least 2 samples per class");
  }
  if (!c.data.mean.empty() || !c.data.stddev.empty()) {
    check(c.data.mean.size() == g.channels && c.data.stddev.size() == g.channels,
          "data.mean and data.stddev need one value per input channel (" +
              std::to_string(g.channels) + ")");
    for (double s : c.data.stddev) check(s > 0.0, "data.stddev entries must be positive");
  }
  preflight(c.model);
  return c;
}

std::pair<std::vector<float>, std::vector<float>> data_normalization(const DataConfig& c) {
  if (!c.mean.empty()) {
    return {std::vector<float>(c.mean.begin(), c.mean.end()),
            std::vector<float>(c.stddev.begin(), c.stddev.end())};
  }
  switch (c.kind) {
    case DataKind::mnist: return {{0.1307f}, {0.3081f}};
    case DataKind::cifar: return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
    case DataKind::synthetic: return {{0.0f}, {1.0f}};
  }
  return {{0.0f}, {1.0f}};
}

namespace {

void set_normalization(Dataset& d, const DataConfig& c) {
  auto [mean, stddev] = data_normalization(c);
  d.mean = std::move(mean);
  d.stddev = std::move(stddev);
}

Dataset concat(const std::vector<Dataset>& parts) {
  Dataset out = parts.front();
  if (parts.size() == 1) return out;
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape s = out.images.shape();
  const std::size_t per = shape_numel(s) / s[0];
  s[0] = n;
  std::vector<float> data;
  data.reserve(n * per);
  out.labels.clear();
  for (const auto& p : parts) {
    data.insert(data.end(), p.images.data().begin(), p.images.data().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.images = Tensor<float>(s, std::move(data));
  return out;
}

Dataset finish(Dataset d, const DataConfig& c, std::size_t limit) {
  if (c.kind == DataKind::mnist) d = pad_images(d, c.pad);
  if (limit > 0) d = take(d, limit);
  set_normalization(d, c);
  return d;
}

}  // namespace

Dataset load_train_set(const DataConfig& d) {
  switch (d.kind) {
    case DataKind::mnist: return finish(load_idx(d.train_images, d.train_labels, "train"), d, d.train_limit);
    case DataKind::cifar: {
      std::vector<Dataset> parts;
      for (const auto& f : d.cifar_train) parts.push_back(load_cifar_binary(f, "train"));
      return finish(concat(parts), d, d.train_limit);
    }
    case DataKind::synthetic: {
      Dataset s = synth_nonlocal_dataset(d.synth_train, d.synth_seed);
      s.split = "train";
      return finish(std::move(s), d, d.train_limit);
    }
  }
  throw ConfigError("unknown data kind");
}

Dataset load_test_set(const DataConfig& d) {
  switch (d.kind) {
    case DataKind::mnist: return finish(load_idx(d.test_images, d.test_labels, "test"), d, d.test_limit);
    case DataKind::cifar: return finish(load_cifar_binary(d.cifar_test, "test"), d, d.test_limit);
    case DataKind::synthetic: {
      // Drawn from a different seed than the training split.
      Dataset s = synth_nonlocal_dataset(d.synth_test, d.synth_seed ^ 0x7e57ull);
      s.split = "test";
      return finish(std::move(s), d, d.test_limit);
    }
  }
  throw ConfigError("unknown data kind");
}

TrainOptions train_options(const RunConfig& c) {
  TrainOptions o;
  o.optim = c.optim;
  o.seed = c.run.seed;
  o.augment.flip = c.data.flip;
  o.augment.crop_pad = c.data.crop_pad;
  o.wall_clock = c.run.wall_clock;
  o.debug = c.run.debug;
  o.eval_batch = c.run.eval_batch;
  return o;
}

}  // namespace sapool
