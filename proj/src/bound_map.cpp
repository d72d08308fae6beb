#include "cnncert/bound_map.hpp"

#include <algorithm>
#include <cmath>

namespace cnncert {

class MapBuilder {
 public:
  static LinearBoundMap blank(const Shape3& target, const Shape3& source, const MapGeometry& geom, LayerRef ref) {
    LinearBoundMap m;
    m.target_ = target;
    m.source_ = source;
    m.geom_ = geom;
    m.source_ref_ = ref;
    const Shape a_shape{target.h, target.w, target.c, geom.kernel.h, geom.kernel.w, geom.channels};
    m.a_upper_ = Tensor(a_shape);
    m.a_lower_ = Tensor(a_shape);
    m.b_upper_ = Tensor(target);
    m.b_lower_ = Tensor(target);
    return m;
  }
  static double* au(LinearBoundMap& m, std::size_t j) { return m.a_upper_.data().data() + j * m.geom_.taps(); }
  static double* al(LinearBoundMap& m, std::size_t j) { return m.a_lower_.data().data() + j * m.geom_.taps(); }
  static Tensor& bu(LinearBoundMap& m) { return m.b_upper_; }
  static Tensor& bl(LinearBoundMap& m) { return m.b_lower_; }
  static void set_source(LinearBoundMap& m, const Shape3& source, LayerRef ref) {
    m.source_ = source;
    m.source_ref_ = ref;
  }
};

namespace {

/// Calls fn(i, j, k, row, col, a_upper, a_lower) for every tap of target `t`
/// that lies inside the source layer and has a nonzero coefficient.
template <class Fn>
void for_each_tap(const LinearBoundMap& map, std::size_t t, Fn&& fn) {
  const MapGeometry& g = map.geometry();
  const Shape3& src = map.source_shape();
  const auto ku = map.kernel_upper(t);
  const auto kl = map.kernel_lower(t);
  for (std::size_t i = 0; i < g.kernel.h; ++i) {
    const std::ptrdiff_t row = map.source_row(t, i);
    if (row < 0 || row >= static_cast<std::ptrdiff_t>(src.h)) continue;
    for (std::size_t j = 0; j < g.kernel.w; ++j) {
      const std::ptrdiff_t col = map.source_col(t, j);
      if (col < 0 || col >= static_cast<std::ptrdiff_t>(src.w)) continue;
      const std::size_t base = (i * g.kernel.w + j) * g.channels;
      for (std::size_t k = 0; k < g.channels; ++k) {
        const double u = ku[base + k];
        const double l = kl[base + k];
        if (u == 0.0 && l == 0.0) continue;
        fn(i, j, k, static_cast<std::size_t>(row), static_cast<std::size_t>(col), u, l);
      }
    }
  }
}

/// Geometry after composing a map with a window operator (kernel, stride,
/// padding) whose output is the map's current source layer. Derived from the
/// window-origin identity s_A (s_W x - p_W) - p_A.
MapGeometry composed_geometry(const MapGeometry& g, Extent2 kernel, Extent2 stride, Extent2 padding,
                              std::size_t channels) {
  MapGeometry out;
  out.kernel = {(g.kernel.h - 1) * stride.h + kernel.h, (g.kernel.w - 1) * stride.w + kernel.w};
  out.stride = {g.stride.h * stride.h, g.stride.w * stride.w};
  out.padding = {stride.h * g.padding.h + padding.h, stride.w * g.padding.w + padding.w};
  out.channels = channels;
  return out;
}

void check_source(const LinearBoundMap& map, const Shape3& expected, const char* what) {
  if (map.source_shape() != expected) {
    throw Error(std::string(what) + ": map source shape " + to_string(map.source_shape()) +
                " does not match layer shape " + to_string(expected));
  }
}

bool in_range(std::ptrdiff_t v, std::size_t extent) { return v >= 0 && v < static_cast<std::ptrdiff_t>(extent); }

}  // namespace

LinearBoundMap LinearBoundMap::identity(const Shape3& layer, LayerRef ref) {
  if (layer.size() == 0) throw Error("identity map: layer shape must be non-empty");
  MapGeometry g;
  g.channels = layer.c;
  LinearBoundMap m = MapBuilder::blank(layer, layer, g, ref);
  for (std::size_t t = 0; t < layer.size(); ++t) {
    const std::size_t z = t % layer.c;
    MapBuilder::au(m, t)[z] = 1.0;
    MapBuilder::al(m, t)[z] = 1.0;
  }
  return m;
}

LinearBoundMap LinearBoundMap::linear_forms(const Shape3& layer, std::span<const double> rows, std::size_t count,
                                            LayerRef ref) {
  if (count == 0 || rows.size() != count * layer.size()) {
    throw Error("linear_forms: expected " + std::to_string(count) + " rows of " + std::to_string(layer.size()) +
                " coefficients, got " + std::to_string(rows.size()) + " values");
  }
  MapGeometry g;
  g.kernel = {layer.h, layer.w};
  g.channels = layer.c;
  LinearBoundMap m = MapBuilder::blank(Shape3{1, 1, count}, layer, g, ref);
  std::copy(rows.begin(), rows.end(), m.a_upper_.data().begin());
  std::copy(rows.begin(), rows.end(), m.a_lower_.data().begin());
  return m;
}

std::span<const double> LinearBoundMap::kernel_upper(std::size_t target) const {
  return a_upper_.data().subspan(target * geom_.taps(), geom_.taps());
}

std::span<const double> LinearBoundMap::kernel_lower(std::size_t target) const {
  return a_lower_.data().subspan(target * geom_.taps(), geom_.taps());
}

std::ptrdiff_t LinearBoundMap::source_row(std::size_t target, std::size_t i) const {
  const std::size_t y = target / (target_.w * target_.c);
  return static_cast<std::ptrdiff_t>(y * geom_.stride.h + i) - static_cast<std::ptrdiff_t>(geom_.padding.h);
}

std::ptrdiff_t LinearBoundMap::source_col(std::size_t target, std::size_t j) const {
  const std::size_t x = (target / target_.c) % target_.w;
  return static_cast<std::ptrdiff_t>(x * geom_.stride.w + j) - static_cast<std::ptrdiff_t>(geom_.padding.w);
}

IntervalBounds LinearBoundMap::evaluate(const Tensor& source) const {
  if (source.rank() != 3 || source.shape3() != source_) {
    throw Error("evaluate: value shape " + to_string(source.shape()) + " does not match map source " +
                to_string(source_));
  }
  IntervalBounds out{b_lower_, b_upper_};
  for (std::size_t t = 0; t < num_targets(); ++t) {
    for_each_tap(*this, t, [&](std::size_t, std::size_t, std::size_t k, std::size_t r, std::size_t c, double u, double l) {
      const double v = source.at(r, c, k);
      out.upper[t] += u * v;
      out.lower[t] += l * v;
    });
  }
  return out;
}

namespace {

std::vector<double> densify(const LinearBoundMap& map, bool upper) {
  const std::size_t n_src = map.source_shape().size();
  std::vector<double> dense(map.num_targets() * n_src, 0.0);
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    for_each_tap(map, t, [&](std::size_t, std::size_t, std::size_t k, std::size_t r, std::size_t c, double u, double l) {
      dense[t * n_src + map.source_shape().index(r, c, k)] += upper ? u : l;
    });
  }
  return dense;
}

}  // namespace

std::vector<double> LinearBoundMap::dense_upper() const { return densify(*this, true); }
std::vector<double> LinearBoundMap::dense_lower() const { return densify(*this, false); }

LinearBoundMap backprop_conv(const LinearBoundMap& map, const ConvLayer& conv, const Shape3& input_shape,
                             LayerRef source) {
  const ConvGeometry& cg = conv.geom;
  cg.validate(input_shape);
  check_source(map, cg.output_shape(input_shape), "backprop_conv");
  const MapGeometry g = composed_geometry(map.geometry(), cg.kernel, cg.stride, cg.padding, cg.in_channels);
  LinearBoundMap out = MapBuilder::blank(map.target_shape(), input_shape, g, source);
  Tensor& bu = MapBuilder::bu(out);
  Tensor& bl = MapBuilder::bl(out);
  const auto w = conv.weights.data();
  const std::size_t cin = cg.in_channels;
  const std::size_t cout = cg.out_channels;
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    double* nu = MapBuilder::au(out, t);
    double* nl = MapBuilder::al(out, t);
    double acc_u = map.b_upper()[t];
    double acc_l = map.b_lower()[t];
    for_each_tap(map, t, [&](std::size_t i, std::size_t j, std::size_t k, std::size_t r, std::size_t c, double u, double l) {
      acc_u += u * conv.bias[k];
      acc_l += l * conv.bias[k];
      for (std::size_t a = 0; a < cg.kernel.h; ++a) {
        if (!in_range(static_cast<std::ptrdiff_t>(r * cg.stride.h + a) - static_cast<std::ptrdiff_t>(cg.padding.h),
                      input_shape.h)) {
          continue;
        }
        for (std::size_t b = 0; b < cg.kernel.w; ++b) {
          if (!in_range(static_cast<std::ptrdiff_t>(c * cg.stride.w + b) - static_cast<std::ptrdiff_t>(cg.padding.w),
                        input_shape.w)) {
            continue;
          }
          const std::size_t base = ((i * cg.stride.h + a) * g.kernel.w + (j * cg.stride.w + b)) * cin;
          const double* wk = &w[(a * cg.kernel.w + b) * cin * cout + k];
          for (std::size_t kk = 0; kk < cin; ++kk) {
            const double wv = wk[kk * cout];
            nu[base + kk] += u * wv;
            nl[base + kk] += l * wv;
          }
        }
      }
    });
    bu[t] = acc_u;
    bl[t] = acc_l;
  }
  return out;
}

LinearBoundMap absorb_relaxation(const LinearBoundMap& map, const Relaxation& relax) {
  const Shape3& src = map.source_shape();
  if (relax.slope_upper.shape() != src.to_shape()) {
    throw Error("absorb_relaxation: relaxation shape " + to_string(relax.slope_upper.shape()) +
                " does not match map source " + to_string(src));
  }
  LinearBoundMap out = MapBuilder::blank(map.target_shape(), src, map.geometry(), map.source_layer());
  Tensor& bu = MapBuilder::bu(out);
  Tensor& bl = MapBuilder::bl(out);
  const MapGeometry& g = map.geometry();
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    double* nu = MapBuilder::au(out, t);
    double* nl = MapBuilder::al(out, t);
    double acc_u = map.b_upper()[t];
    double acc_l = map.b_lower()[t];
    for_each_tap(map, t, [&](std::size_t i, std::size_t j, std::size_t k, std::size_t r, std::size_t c, double u, double l) {
      const std::size_t q = src.index(r, c, k);
      const std::size_t idx = (i * g.kernel.w + j) * g.channels + k;
      const double su = relax.slope_upper[q], ou = relax.offset_upper[q];
      const double sl = relax.slope_lower[q], ol = relax.offset_lower[q];
      if (u > 0) {
        nu[idx] = u * su;
        acc_u += u * ou;
      } else {
        nu[idx] = u * sl;
        acc_u += u * ol;
      }
      if (l > 0) {
        nl[idx] = l * sl;
        acc_l += l * ol;
      } else {
        nl[idx] = l * su;
        acc_l += l * ou;
      }
    });
    bu[t] = acc_u;
    bl[t] = acc_l;
  }
  return out;
}

LinearBoundMap backprop_act_conv(const LinearBoundMap& map, const ConvLayer& conv, const Shape3& input_shape,
                                 const Relaxation* relax, LayerRef source) {
  LinearBoundMap out = backprop_conv(map, conv, input_shape, source);
  return relax ? absorb_relaxation(out, *relax) : out;
}

LinearBoundMap backprop_batchnorm(const LinearBoundMap& map, const BatchNormBlock& bn, LayerRef source) {
  const MapGeometry& g = map.geometry();
  if (bn.gamma.size() != g.channels) {
    throw Error("backprop_batchnorm: batchnorm has " + std::to_string(bn.gamma.size()) + " channels, map source has " +
                std::to_string(g.channels));
  }
  LinearBoundMap out = MapBuilder::blank(map.target_shape(), map.source_shape(), g, source);
  Tensor& bu = MapBuilder::bu(out);
  Tensor& bl = MapBuilder::bl(out);
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    double* nu = MapBuilder::au(out, t);
    double* nl = MapBuilder::al(out, t);
    double acc_u = map.b_upper()[t];
    double acc_l = map.b_lower()[t];
    for_each_tap(map, t, [&](std::size_t i, std::size_t j, std::size_t k, std::size_t, std::size_t, double u, double l) {
      const std::size_t idx = (i * g.kernel.w + j) * g.channels + k;
      const double scale = bn.scale(k);
      const double shift = bn.shift(k);
      nu[idx] = u * scale;
      nl[idx] = l * scale;
      acc_u += u * shift;
      acc_l += l * shift;
    });
    bu[t] = acc_u;
    bl[t] = acc_l;
  }
  return out;
}

LinearBoundMap backprop_residual(const LinearBoundMap& map, const ResidualBlock& block, const Relaxation* relax,
                                 LayerRef source) {
  const Shape3 input = map.source_shape();
  const Shape3 mid = block.first.geom.output_shape(input);
  if (block.second.geom.output_shape(mid) != input) {
    throw Error("backprop_residual: block is not shape-preserving");
  }
  LinearBoundMap branch = backprop_conv(map, block.second, mid, LayerRef{source.block + 1, true});
  if (relax) branch = absorb_relaxation(branch, *relax);
  LinearBoundMap out = backprop_conv(branch, block.first, input, source);

  // Skip connection: the identity kernel sits at the combined padding offset.
  const Extent2 off{block.first.geom.padding.h + block.second.geom.padding.h,
                    block.first.geom.padding.w + block.second.geom.padding.w};
  const MapGeometry& g = out.geometry();
  const MapGeometry& gm = map.geometry();
  if (g.kernel.h != gm.kernel.h + 2 * off.h || g.kernel.w != gm.kernel.w + 2 * off.w || g.stride != gm.stride ||
      g.channels != gm.channels) {
    throw Error("backprop_residual: residual convolutions must use stride 1 and centred padding");
  }
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    double* nu = MapBuilder::au(out, t);
    double* nl = MapBuilder::al(out, t);
    for_each_tap(map, t, [&](std::size_t i, std::size_t j, std::size_t k, std::size_t, std::size_t, double u, double l) {
      const std::size_t idx = ((i + off.h) * g.kernel.w + (j + off.w)) * g.channels + k;
      nu[idx] += u;
      nl[idx] += l;
    });
  }
  return out;
}

namespace {

Shape3 pool_output_shape(const PoolBlock& pool, const Shape3& in) {
  return {conv_output_extent(in.h, pool.window.h, pool.stride.h, pool.padding.h, "height"),
          conv_output_extent(in.w, pool.window.w, pool.stride.w, pool.padding.w, "width"), in.c};
}

/// Composes the map with a depthwise pooling operator whose per-output planes
/// are given by `planes_at(output_index)`; padded window taps carry zero
/// coefficients.
template <class PlanesAt>
LinearBoundMap compose_pool(const LinearBoundMap& map, const PoolBlock& pool, const Shape3& input_shape,
                            LayerRef source, PlanesAt&& planes_at) {
  const Shape3 pooled = pool_output_shape(pool, input_shape);
  check_source(map, pooled, "backprop_pool");
  const MapGeometry g = composed_geometry(map.geometry(), pool.window, pool.stride, pool.padding, input_shape.c);
  LinearBoundMap out = MapBuilder::blank(map.target_shape(), input_shape, g, source);
  Tensor& bu = MapBuilder::bu(out);
  Tensor& bl = MapBuilder::bl(out);
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    double* nu = MapBuilder::au(out, t);
    double* nl = MapBuilder::al(out, t);
    double acc_u = map.b_upper()[t];
    double acc_l = map.b_lower()[t];
    for_each_tap(map, t, [&](std::size_t i, std::size_t j, std::size_t k, std::size_t r, std::size_t c, double u, double l) {
      const PoolPlanes& p = planes_at(pooled.index(r, c, k));
      acc_u += u * (u > 0 ? p.upper_constant : p.lower_constant);
      acc_l += l * (l > 0 ? p.lower_constant : p.upper_constant);
      for (std::size_t a = 0; a < pool.window.h; ++a) {
        for (std::size_t b = 0; b < pool.window.w; ++b) {
          const double coef = p.coefficients[a * pool.window.w + b];
          if (coef == 0.0) continue;
          const std::size_t idx = ((i * pool.stride.h + a) * g.kernel.w + (j * pool.stride.w + b)) * g.channels + k;
          nu[idx] += u * coef;
          nl[idx] += l * coef;
        }
      }
    });
    bu[t] = acc_u;
    bl[t] = acc_l;
  }
  return out;
}

}  // namespace

PoolPlaneField maxpool_plane_field(const PoolBlock& pool, const IntervalBounds& input) {
  PoolPlaneField field;
  field.pool = pool;
  field.input_shape = input.lower.shape3();
  field.output_shape = pool_output_shape(pool, field.input_shape);
  field.planes.reserve(field.output_shape.size());
  const Shape3& in = field.input_shape;
  const std::size_t window = pool.window.h * pool.window.w;
  std::vector<double> lo, hi;
  std::vector<std::size_t> slot;
  for (std::size_t y = 0; y < field.output_shape.h; ++y) {
    for (std::size_t x = 0; x < field.output_shape.w; ++x) {
      for (std::size_t k = 0; k < in.c; ++k) {
        lo.clear();
        hi.clear();
        slot.clear();
        for (std::size_t a = 0; a < pool.window.h; ++a) {
          const auto r = static_cast<std::ptrdiff_t>(y * pool.stride.h + a) - static_cast<std::ptrdiff_t>(pool.padding.h);
          if (!in_range(r, in.h)) continue;
          for (std::size_t b = 0; b < pool.window.w; ++b) {
            const auto c = static_cast<std::ptrdiff_t>(x * pool.stride.w + b) - static_cast<std::ptrdiff_t>(pool.padding.w);
            if (!in_range(c, in.w)) continue;
            const std::size_t q = in.index(static_cast<std::size_t>(r), static_cast<std::size_t>(c), k);
            lo.push_back(input.lower[q]);
            hi.push_back(input.upper[q]);
            slot.push_back(a * pool.window.w + b);
          }
        }
        PoolPlanes compact = maxpool_planes(lo, hi);
        PoolPlanes full = compact;
        full.coefficients.assign(window, 0.0);
        full.kept.assign(window, false);
        for (std::size_t n = 0; n < slot.size(); ++n) {
          full.coefficients[slot[n]] = compact.coefficients[n];
          full.kept[slot[n]] = compact.kept[n];
        }
        field.planes.push_back(std::move(full));
      }
    }
  }
  return field;
}

LinearBoundMap backprop_maxpool(const LinearBoundMap& map, const PoolPlaneField& field, LayerRef source) {
  if (field.planes.size() != field.output_shape.size()) throw Error("backprop_maxpool: incomplete plane field");
  return compose_pool(map, field.pool, field.input_shape, source,
                      [&](std::size_t q) -> const PoolPlanes& { return field.planes[q]; });
}

LinearBoundMap backprop_avgpool(const LinearBoundMap& map, const PoolBlock& pool, const Shape3& input_shape,
                                LayerRef source) {
  const Shape3 pooled = pool_output_shape(pool, input_shape);
  // Each output averages only its in-range window taps.
  std::vector<PoolPlanes> planes;
  planes.reserve(pooled.size());
  for (std::size_t y = 0; y < pooled.h; ++y) {
    for (std::size_t x = 0; x < pooled.w; ++x) {
      PoolPlanes p;
      p.coefficients.assign(pool.window.h * pool.window.w, 0.0);
      std::size_t count = 0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t a = 0; a < pool.window.h; ++a) {
          const auto r = static_cast<std::ptrdiff_t>(y * pool.stride.h + a) - static_cast<std::ptrdiff_t>(pool.padding.h);
          if (!in_range(r, input_shape.h)) continue;
          for (std::size_t b = 0; b < pool.window.w; ++b) {
            const auto c = static_cast<std::ptrdiff_t>(x * pool.stride.w + b) - static_cast<std::ptrdiff_t>(pool.padding.w);
            if (!in_range(c, input_shape.w)) continue;
            if (pass == 0) ++count;
            else p.coefficients[a * pool.window.w + b] = 1.0 / static_cast<double>(count);
          }
        }
      }
      p.coefficient_sum = 1.0;
      for (std::size_t k = 0; k < pooled.c; ++k) planes.push_back(p);
    }
  }
  return compose_pool(map, pool, input_shape, source, [&](std::size_t q) -> const PoolPlanes& { return planes[q]; });
}

IntervalBounds concretize(const LinearBoundMap& map, const Tensor& x0, double eps, NormOrder p) {
  if (map.source_layer() != LayerRef{}) {
    throw Error("concretize: map references " + to_string(map.source_layer()) + ", not the network input");
  }
  if (x0.rank() != 3 || x0.shape3() != map.source_shape()) {
    throw Error("concretize: x0 shape " + to_string(x0.shape()) + " does not match map source " +
                to_string(map.source_shape()));
  }
  if (!(eps >= 0) || !std::isfinite(eps)) throw Error("concretize: eps must be finite and >= 0");
  const NormOrder q = dual_exponent(p);
  IntervalBounds out = map.evaluate(x0);
  for (std::size_t t = 0; t < map.num_targets(); ++t) {
    out.upper[t] += eps * dual_norm(map.kernel_upper(t), q);
    out.lower[t] -= eps * dual_norm(map.kernel_lower(t), q);
  }
  return out;
}

}  // namespace cnncert
