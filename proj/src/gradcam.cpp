#include "sapool/gradcam.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "sapool/errors.hpp"
#include "sapool/ops.hpp"

namespace sapool {

namespace {

// Reads one whitespace-delimited header integer, skipping '#' comments.
std::size_t header_int(const std::vector<unsigned char>& b, std::size_t& off, const std::string& src,
                       const char* what) {
  while (off < b.size()) {
    if (b[off] == '#') {
      while (off < b.size() && b[off] != '\n') ++off;
    } else if (std::isspace(b[off])) {
      ++off;
    } else {
      break;
    }
  }
  const std::size_t start = off;
  std::size_t v = 0;
  while (off < b.size() && std::isdigit(b[off])) {
    v = v * 10 + (b[off] - '0');
    if (v > (1u << 24)) throw FormatError(src + ": " + what + " too large at byte offset " + std::to_string(start));
    ++off;
  }
  if (off == start) {
    throw FormatError(src + ": expected " + std::string(what) + " at byte offset " + std::to_string(start));
  }
  return v;
}

}  // namespace

Tensor<float> decode_pnm(const std::vector<unsigned char>& b, const std::string& src) {
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6')) {
    throw FormatError(src + ": bad magic at byte offset 0 (expected P5 or P6)");
  }
  const std::size_t c = b[1] == '5' ? 1 : 3;
  std::size_t off = 2;
  const std::size_t w = header_int(b, off, src, "width");
  const std::size_t h = header_int(b, off, src, "height");
  const std::size_t maxval = header_int(b, off, src, "maxval");
  if (maxval == 0 || maxval > 255) {
    throw FormatError(src + ": maxval " + std::to_string(maxval) + " unsupported (1..255)");
  }
  if (w == 0 || h == 0) throw FormatError(src + ": empty image");
  if (off >= b.size() || !std::isspace(b[off])) {
    throw FormatError(src + ": missing whitespace after header at byte offset " + std::to_string(off));
  }
  ++off;
  const std::size_t need = c * h * w;
  if (b.size() - off < need) {
    throw FormatError(src + ": truncated at byte offset " + std::to_string(b.size()) +
                      " (pixel data needs " + std::to_string(off + need) + " bytes)");
  }
  if (b.size() - off > need) {
    throw FormatError(src + ": unexpected trailing data at byte offset " + std::to_string(off + need));
  }
  Tensor<float> t(Shape{c, h, w});
  // Interleaved RGB becomes planar.
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      t[ch * h * w + i] = static_cast<float>(b[off + i * c + ch]) / static_cast<float>(maxval);
  return t;
}

Tensor<float> read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError(path + ": cannot open image");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return decode_pnm(bytes, path);
}

std::vector<unsigned char> encode_pgm(const Tensor<float>& map) {
  if (map.rank() != 2) throw DimensionError("encode_pgm: expected [H,W], got " + shape_str(map.shape()));
  const std::string header =
      "P5\n" + std::to_string(map.dim(1)) + " " + std::to_string(map.dim(0)) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (float v : map.data()) {
    const float c = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    out.push_back(static_cast<unsigned char>(std::lround(c * 255.0f)));
  }
  return out;
}

void write_pgm(const std::string& path, const Tensor<float>& map) {
  const auto bytes = encode_pgm(map);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor<float> minmax_normalize(const Tensor<float>& map) {
  Tensor<float> out = map;
  if (map.numel() == 0) return out;
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const float a = *lo, span = *hi - *lo;
  for (auto& v : out.data()) v = span > 0.0f ? (v - a) / span : 0.0f;
  return out;
}

template <typename T>
Tensor<float> gradcam_combine(const Tensor<T>& act, const Tensor<T>& grad, std::size_t out_h,
                              std::size_t out_w) {
  if (act.rank() != 3 || act.shape() != grad.shape()) {
    throw DimensionError("gradcam: activation " + shape_str(act.shape()) + " and gradient " +
                         shape_str(grad.shape()) + " must be matching [C,h,w]");
  }
  const std::size_t c = act.dim(0), hw = act.dim(1) * act.dim(2);
  Tensor<double> cam(Shape{1, 1, act.dim(1), act.dim(2)});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double w = 0.0;
    for (std::size_t i = 0; i < hw; ++i) w += static_cast<double>(grad[ch * hw + i]);
    w /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += w * static_cast<double>(act[ch * hw + i]);
  }
  for (auto& v : cam.data()) v = std::max(v, 0.0);
  Tape<double> tape(TapeOptions{false, false});
  const Var<double> up = ops::bilinear_upsample(tape, Var<double>(std::move(cam)), out_h, out_w);
  Tensor<float> map(Shape{out_h, out_w});
  for (std::size_t i = 0; i < map.numel(); ++i) map[i] = static_cast<float>(up.value()[i]);
  return minmax_normalize(map);
}

template <typename T>
Tensor<float> gradcam_heatmap(Backbone<T>& net, const Tensor<T>& image, std::size_t class_id,
                              const std::string& layer_id) {
  const auto ids = net.pool_site_ids();
  if (std::find(ids.begin(), ids.end(), layer_id) == ids.end()) {
    std::string list;
    for (const auto& id : ids) list += (list.empty() ? "" : ", ") + id;
    throw ConfigError("unknown layer id '" + layer_id + "' (valid: " + list + ")");
  }
  const auto& cfg = net.config();
  if (class_id >= cfg.num_classes) {
    throw ConfigError("class id " + std::to_string(class_id) + " out of range for " +
                      std::to_string(cfg.num_classes) + " classes");
  }
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw DimensionError("gradcam: expected one image [1,C,H,W], got " + shape_str(image.shape()));
  }
  Tape<T> tape;
  ForwardTrace<T> trace;
  Var<T> logits = net.forward(tape, Var<T>(image, false), Mode::eval, &trace);
  Tensor<T> onehot(logits.shape());
  onehot[class_id] = T(1);
  Var<T> target = ops::sum(tape, ops::mul(tape, logits, Var<T>(std::move(onehot), false)));
  tape.backward(target);
  for (auto& [id, act] : trace.pool_inputs) {
    if (id != layer_id) continue;
    const Shape& s = act.shape();
    const auto av = act.value().data();
    const auto gv = act.grad().data();
    Tensor<T> a(Shape{s[1], s[2], s[3]}, std::vector<T>(av.begin(), av.end()));
    Tensor<T> g(Shape{s[1], s[2], s[3]}, std::vector<T>(gv.begin(), gv.end()));
    return gradcam_combine(a, g, image.dim(2), image.dim(3));
  }
  throw ConfigError("layer id '" + layer_id + "' was not reached by the forward pass");
}

template Tensor<float> gradcam_combine<float>(const Tensor<float>&, const Tensor<float>&, std::size_t,
                                              std::size_t);
template Tensor<float> gradcam_combine<double>(const Tensor<double>&, const Tensor<double>&,
                                               std::size_t, std::size_t);
template Tensor<float> gradcam_heatmap<float>(Backbone<float>&, const Tensor<float>&, std::size_t,
                                              const std::string&);
template Tensor<float> gradcam_heatmap<double>(Backbone<double>&, const Tensor<double>&, std::size_t,
                                               const std::string&);

}  // namespace sapool
