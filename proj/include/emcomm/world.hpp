#pragma once

// Object worlds for the referential game.
//
// An object type is a set of attribute values; an instance renders it as a
// grid of patch feature vectors. Two sources are supported: a synthetic world
// that places one noisy base vector per attribute value on an otherwise empty
// grid, and precomputed patch features read from an EMFT feature file.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "emcomm/params.hpp"
#include "emcomm/random.hpp"
#include "emcomm/tensor.hpp"

namespace emcomm {

struct ObjectType {
  std::vector<std::size_t> values;  // global attribute-value ids, ascending

  friend bool operator==(const ObjectType&, const ObjectType&) = default;
  friend auto operator<=>(const ObjectType&, const ObjectType&) = default;
};

struct ObjectInstance {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t dim = 0;
  std::vector<double> features;  // (grid_h * grid_w) x dim, row-major
  // Attribute value -> occupied patch indices (row * grid_w + col).
  std::map<std::size_t, std::vector<std::size_t>> locations;

  std::size_t patches() const { return grid_h * grid_w; }
};

// ---------------------------------------------------------------------------
// EMFT feature files

struct PatchBox {
  std::uint32_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // half-open

  friend bool operator==(const PatchBox&, const PatchBox&) = default;
};

struct FeatureRecord {
  std::vector<std::uint32_t> classes;
  std::vector<PatchBox> boxes;
  std::vector<float> features;  // grid_h * grid_w * dim
};

struct FeatureDataset {
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::uint32_t dim = 0;
  std::uint32_t items_per_image = 0;
  std::vector<FeatureRecord> records;

  std::size_t patches() const { return std::size_t{grid_h} * grid_w; }

  /// Records grouped by their sorted class tuple.
  std::map<ObjectType, std::vector<std::size_t>> by_type() const {
    std::map<ObjectType, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      ObjectType t;
      t.values.assign(records[i].classes.begin(), records[i].classes.end());
      std::sort(t.values.begin(), t.values.end());
      out[t].push_back(i);
    }
    return out;
  }
};

inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline std::string encode_feature_file(const FeatureDataset& ds) {
  std::string out = "EMFT";
  detail::put_u32(out, kFeatureFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ds.records.size()));
  detail::put_u32(out, ds.grid_h);
  detail::put_u32(out, ds.grid_w);
  detail::put_u32(out, ds.dim);
  detail::put_u32(out, ds.items_per_image);
  for (const auto& rec : ds.records) {
    if (rec.classes.size() != ds.items_per_image || rec.boxes.size() != ds.items_per_image ||
        rec.features.size() != ds.patches() * ds.dim) {
      throw ContractError("encode_feature_file: record does not match header sizes");
    }
    for (auto c : rec.classes) detail::put_u32(out, c);
    for (const auto& b : rec.boxes) {
      detail::put_u32(out, b.row0);
      detail::put_u32(out, b.col0);
      detail::put_u32(out, b.row1);
      detail::put_u32(out, b.col1);
    }
    out.append(reinterpret_cast<const char*>(rec.features.data()), rec.features.size() * sizeof(float));
  }
  return out;
}

inline FeatureDataset decode_feature_file(const std::string& bytes, const std::string& what = "feature file") {
  detail::ByteReader r(bytes, what);
  if (r.str(4) != "EMFT") r.fail("bad magic", 0);
  if (const auto v = r.u32(); v != kFeatureFileVersion) r.fail("unsupported version " + std::to_string(v), 4);
  FeatureDataset ds;
  const std::uint32_t n = r.u32();
  ds.grid_h = r.u32();
  ds.grid_w = r.u32();
  ds.dim = r.u32();
  ds.items_per_image = r.u32();
  if (ds.grid_h == 0 || ds.grid_w == 0 || ds.dim == 0 || ds.items_per_image == 0) {
    r.fail("zero-sized header field", 12);
  }
  const std::size_t nfeat = ds.patches() * ds.dim;
  ds.records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    FeatureRecord rec;
    for (std::uint32_t k = 0; k < ds.items_per_image; ++k) rec.classes.push_back(r.u32());
    for (std::uint32_t k = 0; k < ds.items_per_image; ++k) {
      const std::size_t box_at = r.offset();
      PatchBox b{r.u32(), r.u32(), r.u32(), r.u32()};
      if (b.row0 >= b.row1 || b.col0 >= b.col1 || b.row1 > ds.grid_h || b.col1 > ds.grid_w) {
        r.fail("bounding box outside the patch grid", box_at);
      }
      rec.boxes.push_back(b);
    }
    rec.features.resize(nfeat);
    std::memcpy(rec.features.data(), r.take(nfeat * sizeof(float)), nfeat * sizeof(float));
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_end()) r.fail("trailing bytes", r.offset());
  return ds;
}

inline FeatureDataset load_feature_file(const std::string& path) {
  return decode_feature_file(detail::read_file(path), path);
}

inline void save_feature_file(const std::string& path, const FeatureDataset& ds) {
  detail::write_file(path, encode_feature_file(ds));
}

// ---------------------------------------------------------------------------
// World construction

enum class WorldKind {
  combination,   // K distinct values out of N, unordered (Fashion-style)
  product,       // one value per attribute, arities listed explicitly
  feature_file,  // types and instances from an EMFT file
};

struct WorldSpec {
  WorldKind kind = WorldKind::combination;
  std::size_t values = 10;              // N, combination worlds
  std::size_t k = 2;                    // values per object, combination worlds
  std::vector<std::size_t> arities;     // product worlds
  std::size_t grid_h = 2;
  std::size_t grid_w = 4;
  std::size_t dim = 16;
  double noise = 0.1;
  std::size_t split_train = 30;         // ratio numerator
  std::size_t split_eval = 15;          // ratio denominator
  std::string feature_file;
};

enum class Split { train, eval };

namespace detail {

inline void combinations(std::size_t n, std::size_t k, std::size_t start, std::vector<std::size_t>& cur,
                         std::vector<ObjectType>& out) {
  if (cur.size() == k) {
    out.push_back(ObjectType{cur});
    return;
  }
  for (std::size_t v = start; v < n; ++v) {
    cur.push_back(v);
    combinations(n, k, v + 1, cur, out);
    cur.pop_back();
  }
}

}  // namespace detail

class World {
 public:
  /// Deterministic in (spec, seed).
  static World build(const WorldSpec& spec, std::uint64_t seed) {
    World w;
    w.spec_ = spec;
    switch (spec.kind) {
      case WorldKind::combination: {
        if (spec.k == 0 || spec.k > spec.values) {
          throw ConfigError("world: need 1 <= k <= values, got k=" + std::to_string(spec.k) +
                            " values=" + std::to_string(spec.values));
        }
        std::vector<std::size_t> cur;
        detail::combinations(spec.values, spec.k, 0, cur, w.universe_);
        w.value_count_ = spec.values;
        w.items_ = spec.k;
        break;
      }
      case WorldKind::product: {
        if (spec.arities.empty()) throw ConfigError("world: product world needs arities");
        std::vector<std::size_t> offsets;
        std::size_t total = 0;
        for (std::size_t a : spec.arities) {
          if (a == 0) throw ConfigError("world: zero arity");
          offsets.push_back(total);
          total += a;
        }
        std::vector<std::size_t> idx(spec.arities.size(), 0);
        while (true) {
          ObjectType t;
          for (std::size_t i = 0; i < idx.size(); ++i) t.values.push_back(offsets[i] + idx[i]);
          w.universe_.push_back(t);
          std::size_t i = idx.size();
          while (i-- > 0) {
            if (++idx[i] < spec.arities[i]) break;
            idx[i] = 0;
          }
          if (i == static_cast<std::size_t>(-1)) break;
        }
        std::sort(w.universe_.begin(), w.universe_.end());
        w.value_count_ = total;
        w.items_ = spec.arities.size();
        break;
      }
      case WorldKind::feature_file: {
        auto ds = std::make_shared<FeatureDataset>(load_feature_file(spec.feature_file));
        w.adopt_dataset(std::move(ds));
        break;
      }
    }
    if (spec.kind != WorldKind::feature_file) {
      w.grid_h_ = spec.grid_h;
      w.grid_w_ = spec.grid_w;
      w.dim_ = spec.dim;
      if (w.grid_h_ * w.grid_w_ < w.items_) {
        throw ConfigError("world: " + std::to_string(w.grid_h_ * w.grid_w_) +
                          " patches cannot hold " + std::to_string(w.items_) + " items");
      }
      if (w.dim_ == 0) throw ConfigError("world: feature dim must be positive");
      Rng base_rng(derive_seed(seed, 0));
      w.base_.assign(w.value_count_, std::vector<double>(w.dim_));
      for (auto& v : w.base_)
        for (double& x : v) x = standard_normal(base_rng);
    }
    w.make_split(seed);
    return w;
  }

  /// World over an in-memory dataset (feature-file mode).
  static World from_dataset(FeatureDataset ds, std::size_t split_train, std::size_t split_eval,
                            std::uint64_t seed) {
    World w;
    w.spec_.kind = WorldKind::feature_file;
    w.spec_.split_train = split_train;
    w.spec_.split_eval = split_eval;
    w.adopt_dataset(std::make_shared<FeatureDataset>(std::move(ds)));
    w.make_split(seed);
    return w;
  }

  const WorldSpec& spec() const { return spec_; }
  const std::vector<ObjectType>& universe() const { return universe_; }
  const std::vector<std::size_t>& train_types() const { return train_; }
  const std::vector<std::size_t>& eval_types() const { return eval_; }
  const std::vector<std::size_t>& types(Split s) const { return s == Split::train ? train_ : eval_; }
  std::size_t value_count() const { return value_count_; }
  std::size_t patches() const { return grid_h_ * grid_w_; }
  std::size_t grid_h() const { return grid_h_; }
  std::size_t grid_w() const { return grid_w_; }
  std::size_t dim() const { return dim_; }
  const std::vector<std::vector<double>>& base_vectors() const { return base_; }

  std::size_t type_index(const ObjectType& t) const {
    auto it = std::lower_bound(universe_.begin(), universe_.end(), t);
    if (it == universe_.end() || *it != t) throw LookupError("object type not in universe");
    return static_cast<std::size_t>(it - universe_.begin());
  }

  /// Multi-hot vector over all attribute values.
  std::vector<double> binary_vector(std::size_t type) const {
    std::vector<double> v(value_count_, 0.0);
    for (std::size_t a : universe_.at(type).values) v[a] = 1.0;
    return v;
  }

  ObjectInstance render(std::size_t type, Rng& rng) const {
    if (type >= universe_.size()) throw LookupError("render: unknown object type " + std::to_string(type));
    return dataset_ ? render_stored(type, rng) : render_synthetic(type, rng);
  }

 private:
  ObjectInstance render_synthetic(std::size_t type, Rng& rng) const {
    ObjectInstance inst;
    inst.grid_h = grid_h_;
    inst.grid_w = grid_w_;
    inst.dim = dim_;
    inst.features.assign(patches() * dim_, 0.0);
    std::vector<std::size_t> slots(patches());
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
    const auto& values = universe_[type].values;
    // Partial Fisher-Yates: the first |values| slots are a uniform arrangement.
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::swap(slots[i], slots[i + uniform_index(rng, slots.size() - i)]);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      double* dst = inst.features.data() + slots[i] * dim_;
      const auto& base = base_[values[i]];
      for (std::size_t j = 0; j < dim_; ++j) dst[j] = base[j] + spec_.noise * standard_normal(rng);
      inst.locations[values[i]] = {slots[i]};
    }
    return inst;
  }

  ObjectInstance render_stored(std::size_t type, Rng& rng) const {
    const auto& pool = records_by_type_[type];
    const FeatureRecord& rec = dataset_->records[pool[uniform_index(rng, pool.size())]];
    return instance_from_record(rec);
  }

  ObjectInstance instance_from_record(const FeatureRecord& rec) const {
    ObjectInstance inst;
    inst.grid_h = grid_h_;
    inst.grid_w = grid_w_;
    inst.dim = dim_;
    inst.features.assign(rec.features.begin(), rec.features.end());
    for (std::size_t k = 0; k < rec.classes.size(); ++k) {
      auto& cells = inst.locations[rec.classes[k]];
      const PatchBox& b = rec.boxes[k];
      for (std::uint32_t r = b.row0; r < b.row1; ++r)
        for (std::uint32_t c = b.col0; c < b.col1; ++c) cells.push_back(r * grid_w_ + c);
    }
    return inst;
  }

  void adopt_dataset(std::shared_ptr<FeatureDataset> ds) {
    grid_h_ = ds->grid_h;
    grid_w_ = ds->grid_w;
    dim_ = ds->dim;
    items_ = ds->items_per_image;
    std::size_t max_class = 0;
    for (std::size_t i = 0; i < ds->records.size(); ++i) {
      const auto& rec = ds->records[i];
      std::set<std::uint32_t> distinct(rec.classes.begin(), rec.classes.end());
      if (distinct.size() != rec.classes.size()) {
        throw ConfigError("feature world: record " + std::to_string(i) + " repeats a class id");
      }
      std::vector<int> owner(ds->patches(), -1);
      for (std::size_t k = 0; k < rec.boxes.size(); ++k) {
        const PatchBox& b = rec.boxes[k];
        for (std::uint32_t r = b.row0; r < b.row1; ++r)
          for (std::uint32_t c = b.col0; c < b.col1; ++c) {
            int& o = owner[r * ds->grid_w + c];
            if (o >= 0) throw ConfigError("feature world: record " + std::to_string(i) + " has overlapping items");
            o = static_cast<int>(k);
          }
      }
      for (auto c : rec.classes) max_class = std::max<std::size_t>(max_class, c);
    }
    auto groups = ds->by_type();
    for (auto& [t, idx] : groups) {
      universe_.push_back(t);
      records_by_type_.push_back(idx);
    }
    value_count_ = ds->records.empty() ? 0 : max_class + 1;
    dataset_ = std::move(ds);
  }

  void make_split(std::uint64_t seed) {
    const std::size_t u = universe_.size();
    const std::size_t a = spec_.split_train, b = spec_.split_eval;
    if (a == 0 || b == 0) throw ConfigError("world: split ratio parts must be positive");
    std::size_t ntrain;
    if (a + b > u) {
      throw ConfigError("world: split " + std::to_string(a) + "/" + std::to_string(b) +
                        " larger than universe of " + std::to_string(u) + " types");
    } else if (a + b == u) {
      ntrain = a;
    } else {
      ntrain = static_cast<std::size_t>(std::llround(static_cast<double>(u) * a / (a + b)));
    }
    if (ntrain == 0 || ntrain >= u) throw ConfigError("world: split leaves an empty side");
    std::vector<std::size_t> order(u);
    for (std::size_t i = 0; i < u; ++i) order[i] = i;
    Rng split_rng(derive_seed(seed, 1));
    shuffle(order, split_rng);
    train_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ntrain));
    eval_.assign(order.begin() + static_cast<std::ptrdiff_t>(ntrain), order.end());
    std::sort(train_.begin(), train_.end());
    std::sort(eval_.begin(), eval_.end());
  }

  WorldSpec spec_;
  std::vector<ObjectType> universe_;
  std::vector<std::size_t> train_, eval_;
  std::size_t value_count_ = 0;
  std::size_t items_ = 0;
  std::size_t grid_h_ = 0, grid_w_ = 0, dim_ = 0;
  std::vector<std::vector<double>> base_;
  std::shared_ptr<const FeatureDataset> dataset_;
  std::vector<std::vector<std::size_t>> records_by_type_;
};

// ---------------------------------------------------------------------------
// Episodes

enum class DistractorPool { same_split, universe };

struct Episode {
  ObjectInstance speaker_instance;
  std::vector<ObjectInstance> candidates;
  std::vector<std::size_t> candidate_types;
  std::size_t target_index = 0;

  std::size_t target_type() const { return candidate_types[target_index]; }
};

inline Episode sample_episode(const World& world, Split split, std::size_t num_candidates, Rng& rng,
                              DistractorPool pool = DistractorPool::same_split) {
  const auto& split_types = world.types(split);
  if (num_candidates == 0 || num_candidates > split_types.size()) {
    throw ConfigError("sample_episode: " + std::to_string(num_candidates) + " candidates from a split of " +
                      std::to_string(split_types.size()) + " types");
  }
  const std::size_t target = split_types[uniform_index(rng, split_types.size())];
  std::vector<std::size_t> others;
  if (pool == DistractorPool::same_split) {
    for (std::size_t t : split_types)
      if (t != target) others.push_back(t);
  } else {
    for (std::size_t t = 0; t < world.universe().size(); ++t)
      if (t != target) others.push_back(t);
  }
  if (others.size() + 1 < num_candidates) throw ConfigError("sample_episode: distractor pool too small");
  for (std::size_t i = 0; i + 1 < num_candidates; ++i) {
    std::swap(others[i], others[i + uniform_index(rng, others.size() - i)]);
  }
  Episode ep;
  ep.target_index = uniform_index(rng, num_candidates);
  ep.candidate_types.reserve(num_candidates);
  for (std::size_t i = 0, d = 0; i < num_candidates; ++i) {
    ep.candidate_types.push_back(i == ep.target_index ? target : others[d++]);
  }
  ep.speaker_instance = world.render(target, rng);
  for (std::size_t t : ep.candidate_types) ep.candidates.push_back(world.render(t, rng));
  return ep;
}

/// Writes a synthetic world's renders as an EMFT dataset; each item's box is
/// its single patch cell.
inline FeatureDataset synthesize_dataset(const World& world, std::size_t instances_per_type, Rng& rng) {
  FeatureDataset ds;
  ds.grid_h = static_cast<std::uint32_t>(world.grid_h());
  ds.grid_w = static_cast<std::uint32_t>(world.grid_w());
  ds.dim = static_cast<std::uint32_t>(world.dim());
  ds.items_per_image = static_cast<std::uint32_t>(world.universe().front().values.size());
  for (std::size_t t = 0; t < world.universe().size(); ++t) {
    for (std::size_t i = 0; i < instances_per_type; ++i) {
      const ObjectInstance inst = world.render(t, rng);
      FeatureRecord rec;
      for (const auto& [value, cells] : inst.locations) {
        rec.classes.push_back(static_cast<std::uint32_t>(value));
        const auto r = static_cast<std::uint32_t>(cells.front() / world.grid_w());
        const auto c = static_cast<std::uint32_t>(cells.front() % world.grid_w());
        rec.boxes.push_back(PatchBox{r, c, r + 1, c + 1});
      }
      rec.features.assign(inst.features.begin(), inst.features.end());
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

}  // namespace emcomm
