#include "sapool/profile.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sapool {

void Profiler::record(const std::string& name, const std::string& kind, const Shape& in,
                      const Shape& out, std::uint64_t flops, const std::vector<Shape>& extra_inputs,
                      const std::string& weight_name) {
  LayerRecord r;
  r.name = name;
  r.kind = kind;
  r.stage = stage_;
  r.in = in;
  r.out = out;
  r.flops = flops;
  r.effective_flops = flops;
  if (keep_ && !weight_name.empty()) {
    const double f = std::clamp(keep_(weight_name), 0.0, 1.0);
    r.effective_flops = static_cast<std::uint64_t>(std::llround(static_cast<double>(flops) * f));
  }
  r.out_bytes = bytes(out);
  std::uint64_t live = bytes(in) + r.out_bytes;
  for (const auto& e : extra_inputs) live += bytes(e);
  for (auto h : held_) live += h;
  r.live_bytes = live;
  records_.push_back(std::move(r));
}

std::uint64_t NetworkProfile::total_flops() const {
  std::uint64_t s = 0;
  for (const auto& l : layers) s += l.flops;
  return s;
}

std::uint64_t NetworkProfile::total_effective_flops() const {
  std::uint64_t s = 0;
  for (const auto& l : layers) s += l.effective_flops;
  return s;
}

std::uint64_t NetworkProfile::peak_live_bytes() const {
  std::uint64_t p = 0;
  for (const auto& l : layers) p = std::max(p, l.live_bytes);
  return p;
}

std::uint64_t NetworkProfile::stage_bytes(int stage) const {
  std::uint64_t s = 0;
  for (const auto& l : layers)
    if (l.stage == stage) s += l.out_bytes;
  return s;
}

std::uint64_t NetworkProfile::stage_peak_bytes(int stage) const {
  std::uint64_t p = 0;
  for (const auto& l : layers)
    if (l.stage == stage) p = std::max(p, l.live_bytes);
  return p;
}

std::uint64_t NetworkProfile::flops_with_prefix(const std::string& prefix) const {
  std::uint64_t s = 0;
  for (const auto& l : layers)
    if (l.name.compare(0, prefix.size(), prefix) == 0) s += l.flops;
  return s;
}

std::string NetworkProfile::to_csv() const {
  std::ostringstream os;
  os << "layer,kind,stage,in_shape,out_shape,flops,effective_flops,out_bytes,live_bytes\n";
  auto sh = [](const Shape& s) {
    std::string r;
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
    return r;
  };
  for (const auto& l : layers) {
    os << l.name << ',' << l.kind << ',' << l.stage << ',' << sh(l.in) << ',' << sh(l.out) << ','
       << l.flops << ',' << l.effective_flops << ',' << l.out_bytes << ',' << l.live_bytes << '\n';
  }
  os << "total,,,,," << total_flops() << ',' << total_effective_flops() << ",," << peak_live_bytes()
     << '\n';
  return os.str();
}

}  // namespace sapool
