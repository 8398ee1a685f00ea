#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace mawm {

/// Fixed-width binning of a bounded scalar. Values outside [low, high] clamp
/// to the edge bins; the inverse returns bin centers.
class FixedWidthBins {
 public:
  FixedWidthBins(double low, double high, int bins) : low_(low), high_(high), bins_(bins) {
    if (bins < 1) throw std::invalid_argument("FixedWidthBins: bins must be >= 1");
    if (!(high > low)) throw std::invalid_argument("FixedWidthBins: empty range");
  }

  int bins() const { return bins_; }
  double low() const { return low_; }
  double high() const { return high_; }
  double width() const { return (high_ - low_) / bins_; }

  std::int64_t to_bin(double value) const {
    if (std::isnan(value)) throw std::invalid_argument("FixedWidthBins: NaN value");
    const double scaled = std::floor((value - low_) / width());
    return static_cast<std::int64_t>(std::clamp(scaled, 0.0, static_cast<double>(bins_ - 1)));
  }

  double center(std::int64_t bin) const {
    if (bin < 0 || bin >= bins_) throw std::out_of_range("FixedWidthBins: bin out of range");
    return low_ + (static_cast<double>(bin) + 0.5) * width();
  }

 private:
  double low_;
  double high_;
  int bins_;
};

/// Per-dimension discretizer for continuous actions (256 bins by default).
class ActionDiscretizer {
 public:
  explicit ActionDiscretizer(double low = -1.0, double high = 1.0, int bins = 256)
      : bins_(low, high, bins) {}

  int bins() const { return bins_.bins(); }
  double low() const { return bins_.low(); }
  double high() const { return bins_.high(); }

  std::int64_t discretize(double u) const { return bins_.to_bin(u); }
  double undiscretize(std::int64_t bin) const { return bins_.center(bin); }

  std::vector<std::int64_t> discretize(std::span<const double> u) const {
    std::vector<std::int64_t> out;
    out.reserve(u.size());
    for (double v : u) out.push_back(bins_.to_bin(v));
    return out;
  }

  std::vector<double> undiscretize(std::span<const std::int64_t> bins) const {
    std::vector<double> out;
    out.reserve(bins.size());
    for (auto b : bins) out.push_back(bins_.center(b));
    return out;
  }

 private:
  FixedWidthBins bins_;
};

}  // namespace mawm
