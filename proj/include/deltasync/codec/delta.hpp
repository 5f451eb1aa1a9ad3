#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/parameter_set.hpp"
#include "deltasync/codec/varint.hpp"

namespace deltasync::codec {

struct FusionComponent {
  std::string source;
  std::uint64_t offset = 0;  // flat offset inside the fused tensor

  friend bool operator==(const FusionComponent&, const FusionComponent&) = default;
};

struct FusionEntry {
  std::string fused_name;
  std::vector<FusionComponent> components;

  friend bool operator==(const FusionEntry&, const FusionEntry&) = default;
};

// Maps training-side tensors onto fused inference names (e.g. q/k/v -> qkv_proj)
// by stacking components in a fixed order at deterministic flat offsets.
class FusionMap {
 public:
  FusionMap() = default;

  // Builds offsets from the element counts in `layout`.
  static FusionMap stack(const ParameterSet& layout,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& groups) {
    FusionMap map;
    for (const auto& [fused, sources] : groups) {
      FusionEntry e{fused, {}};
      std::uint64_t offset = 0;
      for (const auto& s : sources) {
        const auto* t = layout.find(s);
        if (!t) throw Error(ErrorCode::fusion_source_missing, s);
        e.components.push_back({s, offset});
        offset += t->element_count();
      }
      map.add(std::move(e));
    }
    return map;
  }

  void add(FusionEntry entry) {
    for (std::size_t c = 0; c < entry.components.size(); ++c) {
      const auto& src = entry.components[c].source;
      if (owner_.count(src)) throw Error(ErrorCode::invalid_argument, "source fused twice: " + src);
      owner_.emplace(src, std::make_pair(entries_.size(), c));
    }
    entries_.push_back(std::move(entry));
  }

  const std::vector<FusionEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  // (entry index, component index) for a fused source, or nullptr.
  const std::pair<std::size_t, std::size_t>* owner(const std::string& source) const {
    auto it = owner_.find(source);
    return it == owner_.end() ? nullptr : &it->second;
  }

 private:
  std::vector<FusionEntry> entries_;
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> owner_;
};

// One tensor of the inference (fused) layout and the source tensors backing it.
// Fusion groups found by name: <p>q_proj,k_proj,v_proj -> <p>qkv_proj and
// <p>gate_proj,up_proj -> <p>gate_up_proj, wherever every part is present.
inline FusionMap standard_fusion(const ParameterSet& src) {
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  auto has = [&](const std::string& n) {
    for (const auto& t : src.tensors()) {
      if (t.name == n) return true;
    }
    return false;
  };
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (const auto& t : src.tensors()) {
    if (ends_with(t.name, "q_proj")) {
      const auto p = t.name.substr(0, t.name.size() - 6);
      if (has(p + "k_proj") && has(p + "v_proj"))
        groups.push_back({p + "qkv_proj", {p + "q_proj", p + "k_proj", p + "v_proj"}});
    } else if (ends_with(t.name, "gate_proj")) {
      const auto p = t.name.substr(0, t.name.size() - 9);
      if (has(p + "up_proj")) groups.push_back({p + "gate_up_proj", {p + "gate_proj", p + "up_proj"}});
    }
  }
  return FusionMap::stack(src, groups);
}

struct LayoutItem {
  std::string name;
  std::uint64_t element_count = 0;
  struct Part {
    std::size_t tensor;  // index into the source ParameterSet
    std::uint64_t offset;
  };
  std::vector<Part> parts;
};

// Inference-layout order: walk source tensors in order, emitting each fused group
// at the position of its first member. Validates the map against `src`.
inline std::vector<LayoutItem> inference_layout(const ParameterSet& src, const FusionMap& fusion) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < src.size(); ++i) index.emplace(src.tensors()[i].name, i);
  for (const auto& e : fusion.entries()) {
    std::uint64_t expected = 0;
    for (const auto& c : e.components) {
      auto it = index.find(c.source);
      if (it == index.end()) throw Error(ErrorCode::fusion_source_missing, c.source);
      if (c.offset != expected) throw Error(ErrorCode::malformed, "non-contiguous fusion offset for " + c.source);
      expected += src.tensors()[it->second].element_count();
    }
  }
  std::vector<LayoutItem> items;
  std::vector<bool> emitted(fusion.entries().size(), false);
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& t = src.tensors()[i];
    if (const auto* own = fusion.owner(t.name)) {
      if (emitted[own->first]) continue;
      emitted[own->first] = true;
      const auto& e = fusion.entries()[own->first];
      LayoutItem item{e.fused_name, 0, {}};
      for (const auto& c : e.components) {
        const auto ti = index.at(c.source);
        item.parts.push_back({ti, c.offset});
        item.element_count += src.tensors()[ti].element_count();
      }
      items.push_back(std::move(item));
    } else {
      items.push_back(LayoutItem{t.name, t.element_count(), {{i, 0}}});
    }
  }
  return items;
}

// Source layout -> fused inference layout (fused tensors are 1-D).
inline ParameterSet fuse(const ParameterSet& src, const FusionMap& fusion) {
  ParameterSet out(src.element_type());
  const auto w = src.width();
  for (const auto& item : inference_layout(src, fusion)) {
    if (item.parts.size() == 1 && !fusion.owner(src.tensors()[item.parts[0].tensor].name)) {
      const auto& t = src.tensors()[item.parts[0].tensor];
      out.add(t.name, t.shape, t.data);
      continue;
    }
    Bytes data(item.element_count * w);
    for (const auto& p : item.parts) {
      const auto& t = src.tensors()[p.tensor];
      std::memcpy(data.data() + p.offset * w, t.data.data(), t.data.size());
    }
    out.add(item.name, {item.element_count}, std::move(data));
  }
  return out;
}

namespace detail {

inline void additive_value(ElementType type, const std::uint8_t* oldv, const std::uint8_t* newv, std::uint8_t* out) {
  if (type == ElementType::f32) {
    float a, b;
    std::memcpy(&a, oldv, 4);
    std::memcpy(&b, newv, 4);
    const float d = b - a;
    std::memcpy(out, &d, 4);
  } else {
    std::uint16_t a, b;
    std::memcpy(&a, oldv, 2);
    std::memcpy(&b, newv, 2);
    const std::uint16_t d = float_to_half(half_to_float(b) - half_to_float(a));
    std::memcpy(out, &d, 2);
  }
}

inline void additive_apply(ElementType type, std::uint8_t* target, const std::uint8_t* delta) {
  if (type == ElementType::f32) {
    float a, d;
    std::memcpy(&a, target, 4);
    std::memcpy(&d, delta, 4);
    a += d;
    std::memcpy(target, &a, 4);
  } else {
    std::uint16_t a, d;
    std::memcpy(&a, target, 2);
    std::memcpy(&d, delta, 2);
    const std::uint16_t r = float_to_half(half_to_float(a) + half_to_float(d));
    std::memcpy(target, &r, 2);
  }
}

// Calls fn(flat_index) for each lane where a and b differ bitwise.
template <typename Fn>
void for_each_changed(const std::uint8_t* a, const std::uint8_t* b, std::uint64_t count, std::size_t width, Fn&& fn) {
  static_assert(std::endian::native == std::endian::little, "lane masks assume little-endian words");
  const std::uint64_t bytes = count * width;
  const std::uint64_t per_word = 8 / width;
  std::uint64_t pos = 0;
  // Word-at-a-time skip over identical runs.
  while (pos + 8 <= bytes) {
    std::uint64_t x, y;
    std::memcpy(&x, a + pos, 8);
    std::memcpy(&y, b + pos, 8);
    if (x != y) {
      const std::uint64_t first = pos / width;
      const std::uint64_t diff = x ^ y;
      const std::uint64_t lane_mask = width == 8 ? ~0ull : (1ull << (8 * width)) - 1;
      for (std::uint64_t k = 0; k < per_word; ++k) {
        if ((diff >> (8 * width * k)) & lane_mask) fn(first + k);
      }
    }
    pos += 8;
  }
  for (; pos < bytes; pos += width)
    if (std::memcmp(a + pos, b + pos, width) != 0) fn(pos / width);
}

}  // namespace detail

// Sparse delta for one inference-layout tensor.
inline TensorDelta extract_tensor(const ParameterSet& old_set, const ParameterSet& new_set, const LayoutItem& item,
                                  DeltaMode mode) {
  const auto type = old_set.element_type();
  const auto w = element_width(type);
  TensorDelta td;
  td.name = item.name;
  td.element_count = item.element_count;
  td.mode = mode;
  std::uint64_t prev = 0;
  bool first = true;
  for (const auto& part : item.parts) {
    const auto& a = old_set.tensors()[part.tensor];
    const auto& b = new_set.tensors()[part.tensor];
    detail::for_each_changed(a.data.data(), b.data.data(), a.element_count(), w, [&](std::uint64_t i) {
      const std::uint64_t idx = part.offset + i;
      varint_encode(first ? idx : idx - prev, td.index_stream);
      first = false;
      prev = idx;
      if (mode == DeltaMode::replace) {
        const auto* v = b.data.data() + i * w;
        td.values.insert(td.values.end(), v, v + w);
      } else {
        std::uint8_t v[8];
        detail::additive_value(type, a.data.data() + i * w, b.data.data() + i * w, v);
        td.values.insert(td.values.end(), v, v + w);
      }
      ++td.nnz;
    });
  }
  return td;
}

// Calls sink(TensorDelta) per inference-layout tensor, in layout order.
template <typename Sink>
void extract_tensors(const ParameterSet& old_set, const ParameterSet& new_set, const FusionMap& fusion, DeltaMode mode,
                     Sink&& sink) {
  require_same_structure(old_set, new_set);
  for (const auto& item : inference_layout(old_set, fusion)) sink(extract_tensor(old_set, new_set, item, mode));
}

inline DeltaCheckpoint extract_delta(const ParameterSet& old_set, const ParameterSet& new_set, const FusionMap& fusion,
                                     DeltaMode mode, std::uint64_t version, std::uint64_t base_version) {
  std::vector<TensorDelta> tensors;
  extract_tensors(old_set, new_set, fusion, mode, [&](TensorDelta td) { tensors.push_back(std::move(td)); });
  return DeltaCheckpoint::seal(version, base_version, old_set.element_type(), std::move(tensors));
}

// Dense payload for one inference-layout tensor: every position, in order.
inline TensorDelta dense_tensor(const ParameterSet& src, const LayoutItem& item) {
  const auto w = src.width();
  TensorDelta td;
  td.name = item.name;
  td.element_count = item.element_count;
  td.nnz = item.element_count;
  td.values.resize(item.element_count * w);
  for (const auto& p : item.parts) {
    const auto& t = src.tensors()[p.tensor];
    std::memcpy(td.values.data() + p.offset * w, t.data.data(), t.data.size());
  }
  return td;
}

template <typename Sink>
void dense_tensors(const ParameterSet& src, const FusionMap& fusion, Sink&& sink) {
  for (const auto& item : inference_layout(src, fusion)) sink(dense_tensor(src, item));
}

// Full snapshot in the delta container (genesis and full-broadcast mode).
inline DeltaCheckpoint dense_snapshot(const ParameterSet& src, const FusionMap& fusion, std::uint64_t version,
                                      std::uint64_t base_version) {
  std::vector<TensorDelta> tensors;
  dense_tensors(src, fusion, [&](TensorDelta td) { tensors.push_back(std::move(td)); });
  return DeltaCheckpoint::seal(version, base_version, src.element_type(), std::move(tensors));
}

// Digest of the inference layout (names, element counts, data; shapes ignored),
// so a source-layout set and its fused copy hash the same.
inline Digest layout_digest(const ParameterSet& src, const FusionMap& fusion = {}) {
  Sha256 h;
  Bytes meta;
  ByteWriter w(meta);
  w.u8(static_cast<std::uint8_t>(src.element_type()));
  h.update(meta);
  for (const auto& item : inference_layout(src, fusion)) {
    meta.clear();
    w.str16(item.name);
    w.u64(item.element_count);
    h.update(meta);
    for (const auto& p : item.parts) h.update(src.tensors()[p.tensor].data);
  }
  return h.finish();
}

// Applies a parsed checkpoint to a fused-layout parameter set. Everything is
// validated before the first write, so a failure leaves `params` untouched.
inline void apply_delta(ParameterSet& params, const CheckpointView& delta) {
  if (delta.header.element_type != params.element_type())
    throw Error(ErrorCode::element_type_mismatch, "delta element type differs from parameters");
  const auto w = params.width();
  std::vector<Tensor*> targets;
  targets.reserve(delta.tensors.size());
  for (const auto& t : delta.tensors) {
    auto* target = params.find(std::string(t.name));
    if (!target) throw Error(ErrorCode::unknown_tensor, std::string(t.name));
    if (target->element_count() != t.element_count)
      throw Error(ErrorCode::index_out_of_range, "element count differs for " + std::string(t.name));
    validate_tensor(t, w);
    targets.push_back(target);
  }
  for (std::size_t k = 0; k < delta.tensors.size(); ++k) {
    const auto& t = delta.tensors[k];
    auto* dst = targets[k]->data.data();
    if (t.nnz == 0) continue;
    if (t.dense()) {
      if (t.mode == DeltaMode::replace) {
        std::memcpy(dst, t.values.data(), t.values.size());
      } else {
        for (std::uint64_t i = 0; i < t.nnz; ++i) detail::additive_apply(delta.header.element_type, dst + i * w, t.values.data() + i * w);
      }
      continue;
    }
    IndexDecoder dec(t.index_stream, t.element_count);
    const std::uint8_t* v = t.values.data();
    while (!dec.done()) {
      const auto idx = dec.next();
      if (t.mode == DeltaMode::replace) {
        std::memcpy(dst + idx * w, v, w);
      } else {
        detail::additive_apply(delta.header.element_type, dst + idx * w, v);
      }
      v += w;
    }
  }
}

// Verifies the sealed hash, then applies.
inline void apply_delta(ParameterSet& params, const DeltaCheckpoint& delta) {
  if (delta.compute_body_hash() != delta.body_hash)
    throw Error(ErrorCode::hash_mismatch, "checkpoint body does not match its hash");
  CheckpointView view;
  view.header = delta.header();
  for (const auto& t : delta.tensors) view.tensors.push_back(view_of(t));
  apply_delta(params, view);
}

// Functional form: returns the updated copy.
inline ParameterSet applied(ParameterSet params, const DeltaCheckpoint& delta) {
  apply_delta(params, delta);
  return params;
}

struct SparsityStats {
  std::uint64_t total_elements = 0;
  std::uint64_t total_nonzeros = 0;
  double rho = 0.0;
};

// Element-wise nonzero ratio; "nonzero" means the stored lanes differ bitwise.
inline SparsityStats compute_rho(const ParameterSet& old_set, const ParameterSet& new_set) {
  require_same_structure(old_set, new_set);
  SparsityStats s;
  const auto w = old_set.width();
  for (std::size_t i = 0; i < old_set.size(); ++i) {
    const auto& a = old_set.tensors()[i];
    const auto& b = new_set.tensors()[i];
    s.total_elements += a.element_count();
    detail::for_each_changed(a.data.data(), b.data.data(), a.element_count(), w,
                             [&](std::uint64_t) { ++s.total_nonzeros; });
  }
  s.rho = s.total_elements ? static_cast<double>(s.total_nonzeros) / static_cast<double>(s.total_elements) : 0.0;
  return s;
}

inline SparsityStats checkpoint_sparsity(const CheckpointView& view) {
  SparsityStats s;
  for (const auto& t : view.tensors) {
    s.total_elements += t.element_count;
    s.total_nonzeros += t.nnz;
  }
  s.rho = s.total_elements ? static_cast<double>(s.total_nonzeros) / static_cast<double>(s.total_elements) : 0.0;
  return s;
}

}  // namespace deltasync::codec
