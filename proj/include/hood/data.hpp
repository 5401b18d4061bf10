#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hood/io.hpp"
#include "hood/random.hpp"
#include "hood/tensor.hpp"

namespace hood {

enum class Split : std::uint8_t { labeled = 0, unlabeled = 1, test = 2 };

// Generative description of a synthetic benchmark. Content decides the class,
// style decides the domain, and the two are sampled independently.
struct FactorSpec {
  std::size_t num_known_classes = 6;
  std::size_t num_unknown_classes = 4;
  std::size_t num_styles = 3;
  std::size_t dim = 64;

  double content_amplitude = 0.06;  // per-coordinate magnitude of class prototypes
  double content_spread = 0.15;     // within-class jitter, in prototype units
  double style_amplitude = 0.06;    // per-coordinate magnitude of style offsets
  double noise = 0.02;              // isotropic pixel noise
  // Fraction of coordinates each unknown prototype copies from a randomly
  // chosen known prototype; the rest get fresh random signs. 0 = unrelated.
  double unknown_overlap = 0.0;
  std::size_t unknown_parents = 1;  // known prototypes each unknown borrows from
  double base_level = 0.5;
  double value_lo = 0.0;
  double value_hi = 1.0;

  std::size_t n_labeled = 200;
  std::size_t n_unlabeled = 2000;
  std::size_t n_test = 1000;
  double unknown_fraction_unlabeled = 0.4;
  double unknown_fraction_test = 0.4;

  // Styles drawn for the labeled split and for the unlabeled/test splits.
  // Empty means every style.
  std::vector<std::size_t> source_styles;
  std::vector<std::size_t> target_styles;

  std::size_t num_classes() const { return num_known_classes + num_unknown_classes; }

  void validate() const {
    if (num_known_classes == 0) throw std::invalid_argument("factor spec: zero known classes");
    if (num_styles == 0) throw std::invalid_argument("factor spec: zero styles");
    if (dim < num_classes() + 1) {
      throw std::invalid_argument("factor spec: dimensionality " + std::to_string(dim) +
                                  " too small to embed " + std::to_string(num_classes()) +
                                  " class prototypes");
    }
    if (unknown_parents == 0) throw std::invalid_argument("factor spec: unknown_parents must be >= 1");
    if (unknown_overlap < 0.0 || unknown_overlap > 1.0) {
      throw std::invalid_argument("factor spec: unknown_overlap outside [0,1]");
    }
    if (!(value_lo < value_hi)) throw std::invalid_argument("factor spec: empty value range");
    for (double f : {unknown_fraction_unlabeled, unknown_fraction_test}) {
      if (f < 0.0 || f > 1.0) throw std::invalid_argument("factor spec: unknown fraction outside [0,1]");
    }
    for (const auto* styles : {&source_styles, &target_styles}) {
      for (std::size_t s : *styles) {
        if (s >= num_styles) throw std::invalid_argument("factor spec: style id out of range");
      }
    }
  }
};

struct Instance {
  std::vector<float> x;
  std::uint32_t label = 0;   // class y; ids >= num_known are unknown classes
  std::uint32_t domain = 0;  // native style id
  Split split = Split::labeled;
  std::uint32_t content_id = 0;
  std::uint32_t style_id = 0;

  bool operator==(const Instance&) const = default;
};

struct FactoredDataset {
  std::uint32_t dim = 0;
  std::uint32_t num_known = 0;
  std::uint32_t num_classes = 0;
  std::uint32_t num_styles = 0;
  std::vector<Instance> rows;

  bool is_known(std::uint32_t label) const { return label < num_known; }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].split == s) out.push_back(i);
    return out;
  }

  Tensor<float> features(const std::vector<std::size_t>& idx) const {
    Tensor<float> out = Tensor<float>::matrix(idx.size(), dim);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto& x = rows.at(idx[r]).x;
      std::copy(x.begin(), x.end(), out.row(r).begin());
    }
    return out;
  }

  bool operator==(const FactoredDataset&) const = default;
};

// Fixed random render matrices for one seed.
class SyntheticRenderer {
 public:
  SyntheticRenderer(const FactorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed ^ 0x5EEDC0DEULL);
    const std::size_t k = spec_.num_classes();
    // Random sign patterns; redraw until prototypes are pairwise distinct.
    for (;;) {
      content_ = draw_signs(rng, k, spec_.content_amplitude);
      for (std::size_t u = spec_.num_known_classes; u < k; ++u) {
        std::vector<std::size_t> parents;
        for (std::size_t p = 0; p < spec_.unknown_parents; ++p)
          parents.push_back(rng.below(spec_.num_known_classes));
        for (std::size_t j = 0; j < spec_.dim; ++j) {
          const std::size_t p = rng.below(parents.size());
          if (rng.uniform() < spec_.unknown_overlap) content_[u][j] = content_[parents[p]][j];
        }
      }
      bool distinct = true;
      for (std::size_t a = 0; a < k && distinct; ++a)
        for (std::size_t b = a + 1; b < k && distinct; ++b) distinct = content_[a] != content_[b];
      if (distinct) break;
    }
    style_ = draw_signs(rng, spec_.num_styles, spec_.style_amplitude);
  }

  const FactorSpec& spec() const { return spec_; }
  const std::vector<std::vector<double>>& prototypes() const { return content_; }
  const std::vector<std::vector<double>>& style_offsets() const { return style_; }

  // base + W_c * content + W_s * onehot(style) + noise, clipped to the value range.
  // `content` has one weight per class (one-hot plus jitter).
  std::vector<float> render(const std::vector<double>& content, std::size_t style,
                            const std::vector<double>& noise) const {
    std::vector<float> x(spec_.dim);
    for (std::size_t j = 0; j < spec_.dim; ++j) {
      double v = spec_.base_level + style_[style][j] + (noise.empty() ? 0.0 : noise[j]);
      for (std::size_t c = 0; c < content.size(); ++c) v += content[c] * content_[c][j];
      x[j] = static_cast<float>(std::clamp(v, spec_.value_lo, spec_.value_hi));
    }
    return x;
  }

  std::vector<float> render_clean(std::size_t cls, std::size_t style) const {
    std::vector<double> onehot(spec_.num_classes(), 0.0);
    onehot.at(cls) = 1.0;
    return render(onehot, style, {});
  }

 private:
  std::vector<std::vector<double>> draw_signs(Rng& rng, std::size_t count, double amp) const {
    std::vector<std::vector<double>> out(count, std::vector<double>(spec_.dim));
    for (auto& col : out)
      for (double& v : col) v = (rng.uniform() < 0.5 ? -amp : amp);
    return out;
  }

  FactorSpec spec_;
  std::vector<std::vector<double>> content_;
  std::vector<std::vector<double>> style_;
};

namespace detail {

// Balanced (class, style) sequence: whole shuffled blocks of every pair,
// then a shuffled partial block. Keeps C and S independent in every split.
inline std::vector<std::pair<std::size_t, std::size_t>> balanced_pairs(
    Rng& rng, std::size_t n, const std::vector<std::size_t>& classes,
    const std::vector<std::size_t>& styles) {
  std::vector<std::pair<std::size_t, std::size_t>> block;
  for (std::size_t c : classes)
    for (std::size_t s : styles) block.emplace_back(c, s);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (block.empty()) return out;
  while (out.size() < n) {
    auto b = block;
    rng.shuffle(b);
    for (const auto& p : b) {
      if (out.size() == n) break;
      out.push_back(p);
    }
  }
  return out;
}

inline std::vector<std::size_t> iota_n(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = begin + i;
  return v;
}

}  // namespace detail

inline FactoredDataset generate_synthetic(const FactorSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticRenderer renderer(spec, seed);
  Rng rng(seed);
  const std::size_t k = spec.num_classes();
  const auto all_styles = detail::iota_n(0, spec.num_styles);
  const auto& src = spec.source_styles.empty() ? all_styles : spec.source_styles;
  const auto& tgt = spec.target_styles.empty() ? all_styles : spec.target_styles;
  const auto known = detail::iota_n(0, spec.num_known_classes);
  const auto unknown = detail::iota_n(spec.num_known_classes, spec.num_unknown_classes);

  FactoredDataset ds;
  ds.dim = static_cast<std::uint32_t>(spec.dim);
  ds.num_known = static_cast<std::uint32_t>(spec.num_known_classes);
  ds.num_classes = static_cast<std::uint32_t>(k);
  ds.num_styles = static_cast<std::uint32_t>(spec.num_styles);

  auto emit = [&](Split split, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    for (const auto& [cls, style] : pairs) {
      std::vector<double> content(k, 0.0);
      content[cls] = 1.0;
      if (spec.content_spread > 0.0)
        for (double& v : content) v += spec.content_spread * rng.normal();
      std::vector<double> noise(spec.dim, 0.0);
      if (spec.noise > 0.0)
        for (double& v : noise) v = spec.noise * rng.normal();
      Instance inst;
      inst.x = renderer.render(content, style, noise);
      inst.label = static_cast<std::uint32_t>(cls);
      inst.domain = static_cast<std::uint32_t>(style);
      inst.split = split;
      inst.content_id = static_cast<std::uint32_t>(cls);
      inst.style_id = static_cast<std::uint32_t>(style);
      ds.rows.push_back(std::move(inst));
    }
  };

  auto mixed = [&](std::size_t n, double unknown_fraction) {
    const std::size_t n_unknown =
        unknown.empty() ? 0 : static_cast<std::size_t>(std::llround(unknown_fraction * n));
    auto pairs = detail::balanced_pairs(rng, n - n_unknown, known, tgt);
    auto extra = detail::balanced_pairs(rng, n_unknown, unknown, tgt);
    pairs.insert(pairs.end(), extra.begin(), extra.end());
    rng.shuffle(pairs);
    return pairs;
  };

  emit(Split::labeled, detail::balanced_pairs(rng, spec.n_labeled, known, src));
  emit(Split::unlabeled, mixed(spec.n_unlabeled, spec.unknown_fraction_unlabeled));
  emit(Split::test, mixed(spec.n_test, spec.unknown_fraction_test));
  return ds;
}

inline constexpr std::uint32_t kDatasetVersion = 1;

// "HDAT" | u32 version | u32 rows | u32 dim | u32 known | u32 classes | u32 styles |
// rows of: f32 x[dim] | u32 label | u32 domain | u8 split | u32 content id | u32 style id
inline std::vector<std::uint8_t> encode_dataset(const FactoredDataset& ds) {
  ByteWriter w;
  w.bytes("HDAT");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.rows.size()));
  w.u32(ds.dim);
  w.u32(ds.num_known);
  w.u32(ds.num_classes);
  w.u32(ds.num_styles);
  for (const Instance& r : ds.rows) {
    if (r.x.size() != ds.dim) throw std::invalid_argument("dataset: row dimension mismatch");
    for (float v : r.x) w.f32(v);
    w.u32(r.label);
    w.u32(r.domain);
    w.u8(static_cast<std::uint8_t>(r.split));
    w.u32(r.content_id);
    w.u32(r.style_id);
  }
  return w.buffer();
}

inline FactoredDataset decode_dataset(ByteReader r) {
  r.expect_magic("HDAT");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw VersionError("dataset: unsupported version " + std::to_string(version));
  }
  FactoredDataset ds;
  const std::uint32_t count = r.u32();
  ds.dim = r.u32();
  ds.num_known = r.u32();
  ds.num_classes = r.u32();
  ds.num_styles = r.u32();
  if (ds.num_known > ds.num_classes) throw FormatError("dataset: more known classes than classes");
  const std::size_t row_bytes = 4 * static_cast<std::size_t>(ds.dim) + 17;
  if (r.remaining() < row_bytes * count) {
    throw TruncatedError("dataset: header declares " + std::to_string(count) +
                         " rows but the file is too short");
  }
  ds.rows.resize(count);
  for (Instance& inst : ds.rows) {
    inst.x.resize(ds.dim);
    for (float& v : inst.x) v = r.f32();
    inst.label = r.u32();
    inst.domain = r.u32();
    const std::uint8_t split = r.u8();
    inst.content_id = r.u32();
    inst.style_id = r.u32();
    if (split > 2) throw FormatError("dataset: bad split tag " + std::to_string(split));
    inst.split = static_cast<Split>(split);
    if (inst.label >= ds.num_classes || inst.domain >= ds.num_styles ||
        inst.content_id >= ds.num_classes || inst.style_id >= ds.num_styles) {
      throw FormatError("dataset: label out of declared range");
    }
  }
  if (!r.at_end()) throw FormatError("dataset: trailing bytes after last row");
  return ds;
}

inline void save_dataset(const std::string& path, const FactoredDataset& ds) {
  write_file(path, encode_dataset(ds));
}

inline FactoredDataset load_dataset(const std::string& path) {
  return decode_dataset(ByteReader::from_file(path));
}

}  // namespace hood
