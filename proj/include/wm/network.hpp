#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wm/adam.hpp"
#include "wm/error.hpp"
#include "wm/rng.hpp"
#include "wm/tensor.hpp"

namespace wm {

// Parameter groups, used by gradient routing and diagnostics.
enum NetGroup {
  kGroupEncoder = 1,     // watermark -> feature image
  kGroupFuser = 2,       // feature image + cover -> marked image (and loss features)
  kGroupRecovery = 3,    // transform space -> feature image
  kGroupDecoder = 4,     // feature image -> watermark
  kGroupInvariance = 5,  // marked image -> over-complete transform space
};

template <class S>
struct Conv {
  Tensor<S> w;  // [k,k,Cin,Cout]
  Tensor<S> b;  // [Cout]
};

// Residual block with 1x1, 3x3 and stacked-3x3 branches (32 filters each,
// ReLU), concatenated to 96 channels and merged back to the input channel
// count by a linear 1x1 convolution, then summed with the input.
template <class S>
struct InceptionBlock {
  int channels = 0;
  Conv<S> b1;     // 1x1 F->32
  Conv<S> b2;     // 3x3 F->32
  Conv<S> b3a;    // 3x3 F->32
  Conv<S> b3b;    // 3x3 32->32
  Conv<S> merge;  // 1x1 96->F, linear
};

template <class S>
struct WatermarkEncoder {
  Conv<S> expand1;  // 1x1 1->24, ReLU
  InceptionBlock<S> block_a;  // 24 ch
  Conv<S> expand2;  // 1x1 24->48, ReLU
  InceptionBlock<S> block_b;  // 48 ch
};

template <class S>
struct WatermarkDecoder {
  InceptionBlock<S> block_a;  // 48 ch
  Conv<S> reduce1;  // 1x1 48->24, ReLU
  InceptionBlock<S> block_b;  // 24 ch
  Conv<S> reduce2;  // 1x1 24->1, sigmoid
};

template <class S>
struct Fuser {
  InceptionBlock<S> feat;  // 3 ch; feature extractor shared with the correlation loss
  InceptionBlock<S> fuse;  // 6 ch, on concat(feat(w_f), cover)
  Conv<S> out_proj;        // 1x1 6->3, sigmoid
  InceptionBlock<S> corr;  // 3 ch; second-stage features for the correlation loss
};

template <class S>
struct FeatureRecovery {
  Conv<S> in_proj;  // 1x1 N->3, ReLU
  InceptionBlock<S> block_a;  // 3 ch
  InceptionBlock<S> block_b;  // 3 ch
};

// Per-pixel channel map into the over-complete transform space, tanh
// activation. weight is [3,N], bias [N].
template <class S>
struct InvarianceMap {
  Tensor<S> weight;
  Tensor<S> bias;
};

template <class S>
struct Checkpoint {
  int redundancy = 16;  // N, channel count of the transform space
  float lambda = 0.01f;
  WatermarkEncoder<S> enc;
  Fuser<S> fus;
  FeatureRecovery<S> rec;
  WatermarkDecoder<S> dec;
  InvarianceMap<S> inv;
};

enum class Init { Zero, He, Xavier };

namespace detail {

template <class S, class F>
void visit_params(Checkpoint<S>& ck, F&& f) {
  auto conv = [&](const std::string& n, int g, Conv<S>& c, Init wi) {
    f(n + ".w", g, c.w, wi);
    f(n + ".b", g, c.b, Init::Zero);
  };
  auto block = [&](const std::string& n, int g, InceptionBlock<S>& b) {
    conv(n + ".b1", g, b.b1, Init::He);
    conv(n + ".b2", g, b.b2, Init::He);
    conv(n + ".b3a", g, b.b3a, Init::He);
    conv(n + ".b3b", g, b.b3b, Init::He);
    conv(n + ".merge", g, b.merge, Init::Xavier);
  };
  conv("enc.expand1", kGroupEncoder, ck.enc.expand1, Init::He);
  block("enc.block_a", kGroupEncoder, ck.enc.block_a);
  conv("enc.expand2", kGroupEncoder, ck.enc.expand2, Init::He);
  block("enc.block_b", kGroupEncoder, ck.enc.block_b);

  block("fus.feat", kGroupFuser, ck.fus.feat);
  block("fus.fuse", kGroupFuser, ck.fus.fuse);
  conv("fus.out_proj", kGroupFuser, ck.fus.out_proj, Init::Xavier);
  block("fus.corr", kGroupFuser, ck.fus.corr);

  conv("rec.in_proj", kGroupRecovery, ck.rec.in_proj, Init::He);
  block("rec.block_a", kGroupRecovery, ck.rec.block_a);
  block("rec.block_b", kGroupRecovery, ck.rec.block_b);

  block("dec.block_a", kGroupDecoder, ck.dec.block_a);
  conv("dec.reduce1", kGroupDecoder, ck.dec.reduce1, Init::He);
  block("dec.block_b", kGroupDecoder, ck.dec.block_b);
  conv("dec.reduce2", kGroupDecoder, ck.dec.reduce2, Init::Xavier);

  f("inv.weight", kGroupInvariance, ck.inv.weight, Init::Xavier);
  f("inv.bias", kGroupInvariance, ck.inv.bias, Init::Zero);
}

template <class S>
Conv<S> make_conv(int k, int cin, int cout) {
  return {Tensor<S>::zeros({k, k, cin, cout}), Tensor<S>::zeros({cout})};
}

template <class S>
InceptionBlock<S> make_block(int channels) {
  InceptionBlock<S> b;
  b.channels = channels;
  b.b1 = make_conv<S>(1, channels, 32);
  b.b2 = make_conv<S>(3, channels, 32);
  b.b3a = make_conv<S>(3, channels, 32);
  b.b3b = make_conv<S>(3, 32, 32);
  b.merge = make_conv<S>(1, 96, channels);
  return b;
}

}  // namespace detail

// Allocates all parameter tensors for redundancy N (values zero).
template <class S>
Checkpoint<S> make_checkpoint(int redundancy, float lambda) {
  if (redundancy < 3)
    throw ShapeError("checkpoint: redundancy must be >= 3, got " + std::to_string(redundancy));
  Checkpoint<S> ck;
  ck.redundancy = redundancy;
  ck.lambda = lambda;
  ck.enc.expand1 = detail::make_conv<S>(1, 1, 24);
  ck.enc.block_a = detail::make_block<S>(24);
  ck.enc.expand2 = detail::make_conv<S>(1, 24, 48);
  ck.enc.block_b = detail::make_block<S>(48);
  ck.fus.feat = detail::make_block<S>(3);
  ck.fus.fuse = detail::make_block<S>(6);
  ck.fus.out_proj = detail::make_conv<S>(1, 6, 3);
  ck.fus.corr = detail::make_block<S>(3);
  ck.rec.in_proj = detail::make_conv<S>(1, redundancy, 3);
  ck.rec.block_a = detail::make_block<S>(3);
  ck.rec.block_b = detail::make_block<S>(3);
  ck.dec.block_a = detail::make_block<S>(48);
  ck.dec.reduce1 = detail::make_conv<S>(1, 48, 24);
  ck.dec.block_b = detail::make_block<S>(24);
  ck.dec.reduce2 = detail::make_conv<S>(1, 24, 1);
  ck.inv.weight = Tensor<S>::zeros({3, redundancy});
  ck.inv.bias = Tensor<S>::zeros({redundancy});
  detail::visit_params(ck, [](const std::string&, int, Tensor<S>& t, Init) {
    t.mark_parameter();
  });
  return ck;
}

// Fan-scaled uniform init: He for ReLU-followed maps, Xavier for linear,
// sigmoid and tanh ones. Biases start at zero.
template <class S>
Checkpoint<S> init_checkpoint(int redundancy, float lambda, uint64_t seed) {
  auto ck = make_checkpoint<S>(redundancy, lambda);
  Rng rng(seed);
  detail::visit_params(ck, [&](const std::string&, int, Tensor<S>& t, Init init) {
    if (init == Init::Zero) return;
    const Shape& s = t.shape();
    long fan_in, fan_out;
    if (s.size() == 4) {
      fan_in = static_cast<long>(s[0]) * s[1] * s[2];
      fan_out = static_cast<long>(s[0]) * s[1] * s[3];
    } else {
      fan_in = s[0];
      fan_out = s[1];
    }
    double limit = init == Init::He ? std::sqrt(6.0 / fan_in)
                                    : std::sqrt(6.0 / (fan_in + fan_out));
    S* d = t.data();
    for (long i = 0; i < t.numel(); ++i)
      d[i] = static_cast<S>(rng.uniform(-limit, limit));
  });
  return ck;
}

// Registry of all trainable tensors in a stable order (shared handles).
template <class S>
std::vector<Param<S>> checkpoint_params(Checkpoint<S>& ck) {
  std::vector<Param<S>> out;
  detail::visit_params(ck, [&](const std::string& n, int g, Tensor<S>& t, Init) {
    out.push_back({n, g, t});
  });
  return out;
}

template <class S>
void zero_grads(Checkpoint<S>& ck) {
  detail::visit_params(ck, [](const std::string&, int, Tensor<S>& t, Init) {
    t.zero_grad();
  });
}

template <class S, class T2>
Checkpoint<T2> cast_checkpoint(Checkpoint<S>& ck) {
  auto out = make_checkpoint<T2>(ck.redundancy, ck.lambda);
  std::vector<Param<S>> src;
  detail::visit_params(ck, [&](const std::string& n, int g, Tensor<S>& t, Init) {
    src.push_back({n, g, t});
  });
  size_t i = 0;
  detail::visit_params(out, [&](const std::string&, int, Tensor<T2>& t, Init) {
    const Tensor<S>& s = src[i++].tensor;
    T2* d = t.data();
    for (long j = 0; j < t.numel(); ++j) d[j] = static_cast<T2>(s.data()[j]);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> block_forward(const Tensor<S>& x, const InceptionBlock<S>& p) {
  if (x.shape().size() != 3 || x.shape()[2] != p.channels)
    throw ShapeError("block_forward: expected " + std::to_string(p.channels) +
                     " channels, got input " + shape_str(x.shape()));
  auto a = relu(conv2d(x, p.b1.w, p.b1.b));
  auto b = relu(conv2d(x, p.b2.w, p.b2.b));
  auto c = relu(conv2d(relu(conv2d(x, p.b3a.w, p.b3a.b)), p.b3b.w, p.b3b.b));
  auto merged = conv2d(concat_channels<S>({a, b, c}), p.merge.w, p.merge.b);
  return add(x, merged);
}

// Watermark grid [h,w,1] in [0,1] -> feature image [4h,4w,3].
template <class S>
Tensor<S> encode_watermark(const Checkpoint<S>& ck, const Tensor<S>& w) {
  if (w.shape().size() != 3 || w.shape()[2] != 1)
    throw ShapeError("encode_watermark: input must be [h,w,1], got " + shape_str(w.shape()));
  auto e1 = relu(conv2d(w, ck.enc.expand1.w, ck.enc.expand1.b));
  auto g1 = block_forward(e1, ck.enc.block_a);
  auto e2 = relu(conv2d(g1, ck.enc.expand2.w, ck.enc.expand2.b));
  auto g2 = block_forward(e2, ck.enc.block_b);
  return depth_to_space(g2, 4);
}

// Feature image [4h,4w,3] -> watermark estimate [h,w,1], values in (0,1).
template <class S>
Tensor<S> decode_watermark(const Checkpoint<S>& ck, const Tensor<S>& wf) {
  if (wf.shape().size() != 3 || wf.shape()[2] != 3)
    throw ShapeError("decode_watermark: input must be [H,W,3], got " + shape_str(wf.shape()));
  auto s = space_to_depth(wf, 4);
  auto g1 = block_forward(s, ck.dec.block_a);
  auto r1 = relu(conv2d(g1, ck.dec.reduce1.w, ck.dec.reduce1.b));
  auto g2 = block_forward(r1, ck.dec.block_b);
  return sigmoid(conv2d(g2, ck.dec.reduce2.w, ck.dec.reduce2.b));
}

template <class S>
struct FuseOut {
  Tensor<S> marked;  // [H,W,3] in (0,1)
  // Correlation-loss features: first- and second-stage features of the
  // feature image and of the marked image. Empty unless requested.
  Tensor<S> f1_wf, f1_m, f2_wf, f2_m;
};

// Fuses the watermark feature image with the cover. The first block's
// features of w_f feed the fusion; the same block plus the dedicated
// second-stage block produce the correlation-loss features for both w_f
// and the marked result.
template <class S>
FuseOut<S> fuse(const Checkpoint<S>& ck, const Tensor<S>& wf, const Tensor<S>& cover,
                bool with_loss_features = true) {
  if (wf.shape().size() != 3 || wf.shape()[2] != 3)
    throw ShapeError("fuse: feature image must be [H,W,3], got " + shape_str(wf.shape()));
  if (cover.shape() != wf.shape())
    throw ShapeError("fuse: cover " + shape_str(cover.shape()) +
                     " does not match feature image " + shape_str(wf.shape()));
  FuseOut<S> out;
  auto f1_wf = block_forward(wf, ck.fus.feat);
  auto cat = concat_channels<S>({f1_wf, cover});
  auto fused = block_forward(cat, ck.fus.fuse);
  out.marked = sigmoid(conv2d(fused, ck.fus.out_proj.w, ck.fus.out_proj.b));
  if (with_loss_features) {
    out.f1_wf = f1_wf;
    out.f1_m = block_forward(out.marked, ck.fus.feat);
    out.f2_wf = block_forward(f1_wf, ck.fus.corr);
    out.f2_m = block_forward(out.f1_m, ck.fus.corr);
  }
  return out;
}

// Marked image [H,W,3] -> transform space [H,W,N], tanh range (-1,1).
// The returned tensor is also the unit-activation map h used by the
// contraction penalty.
template <class S>
Tensor<S> invariance_forward(const Checkpoint<S>& ck, const Tensor<S>& m) {
  if (m.shape().size() != 3 || m.shape()[2] != 3)
    throw ShapeError("invariance_forward: input must be [H,W,3], got " + shape_str(m.shape()));
  return tanh_act(pointwise_linear(m, ck.inv.weight, ck.inv.bias));
}

// Transform space [H,W,N] -> feature image [H,W,3].
template <class S>
Tensor<S> recover_features(const Checkpoint<S>& ck, const Tensor<S>& t) {
  if (t.shape().size() != 3 || t.shape()[2] != ck.redundancy)
    throw ShapeError("recover_features: input has " +
                     std::to_string(t.shape().size() == 3 ? t.shape()[2] : -1) +
                     " channels but checkpoint redundancy is " +
                     std::to_string(ck.redundancy));
  auto p = relu(conv2d(t, ck.rec.in_proj.w, ck.rec.in_proj.b));
  return block_forward(block_forward(p, ck.rec.block_a), ck.rec.block_b);
}

template <class S>
struct PipelineOut {
  Tensor<S> wf;      // encoded watermark feature image
  FuseOut<S> fused;  // marked image + correlation features
  Tensor<S> t;       // transform space (tanh activations h)
  Tensor<S> wf_hat;  // recovered feature image
  Tensor<S> w_hat;   // reconstructed watermark, (0,1)
};

// Full embed -> transform -> extract composition with all intermediates
// exposed for the loss.
template <class S>
PipelineOut<S> pipeline_forward(const Checkpoint<S>& ck, const Tensor<S>& w,
                                const Tensor<S>& cover, bool with_loss_features = true) {
  PipelineOut<S> out;
  out.wf = encode_watermark(ck, w);
  out.fused = fuse(ck, out.wf, cover, with_loss_features);
  out.t = invariance_forward(ck, out.fused.marked);
  out.wf_hat = recover_features(ck, out.t);
  out.w_hat = decode_watermark(ck, out.wf_hat);
  return out;
}

// Extraction-only path: marked image -> watermark estimate.
template <class S>
Tensor<S> extract_forward(const Checkpoint<S>& ck, const Tensor<S>& m) {
  return decode_watermark(ck, recover_features(ck, invariance_forward(ck, m)));
}

// ---------------------------------------------------------------------------
// Serialization: versioned container, bit-exact round trip.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kCkptMagic[8] = {'W', 'M', 'C', 'K', 'P', 'T', '0', '1'};

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
inline void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}
inline float read_f32(std::istream& is) {
  uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}
}  // namespace detail

inline void save_checkpoint(Checkpoint<float>& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint file for writing: " + path);
  os.write(detail::kCkptMagic, 8);
  detail::write_u32(os, 1);  // format version
  detail::write_u32(os, static_cast<uint32_t>(ck.redundancy));
  detail::write_f32(os, ck.lambda);
  auto params = checkpoint_params(ck);
  detail::write_u32(os, static_cast<uint32_t>(params.size()));
  for (auto& p : params) {
    detail::write_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u32(os, static_cast<uint32_t>(p.tensor.shape().size()));
    for (int d : p.tensor.shape()) detail::write_u32(os, static_cast<uint32_t>(d));
    for (long i = 0; i < p.tensor.numel(); ++i) detail::write_f32(os, p.tensor.data()[i]);
  }
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint file: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint32_t version = detail::read_u32(is);
  if (version != 1)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  int redundancy = static_cast<int>(detail::read_u32(is));
  float lambda = detail::read_f32(is);
  auto ck = make_checkpoint<float>(redundancy, lambda);
  uint32_t count = detail::read_u32(is);

  std::map<std::string, std::pair<Shape, std::vector<float>>> entries;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = detail::read_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    uint32_t nd = detail::read_u32(is);
    Shape shape(nd);
    long n = 1;
    for (uint32_t d = 0; d < nd; ++d) {
      shape[d] = static_cast<int>(detail::read_u32(is));
      n *= shape[d];
    }
    std::vector<float> vals(static_cast<size_t>(n));
    for (long j = 0; j < n; ++j) vals[static_cast<size_t>(j)] = detail::read_f32(is);
    if (!is) throw IoError("truncated checkpoint: " + path);
    entries[name] = {std::move(shape), std::move(vals)};
  }

  detail::visit_params(ck, [&](const std::string& n, int, Tensor<float>& t, Init) {
    auto it = entries.find(n);
    if (it == entries.end()) throw IoError("checkpoint missing parameter " + n + ": " + path);
    if (it->second.first != t.shape())
      throw IoError("checkpoint parameter " + n + " has shape " +
                    shape_str(it->second.first) + ", expected " + shape_str(t.shape()));
    std::copy(it->second.second.begin(), it->second.second.end(), t.data());
    for (long j = 0; j < t.numel(); ++j)
      if (!std::isfinite(t.data()[j]))
        throw IoError("checkpoint parameter " + n + " contains non-finite values");
    entries.erase(it);
  });
  if (!entries.empty())
    throw IoError("checkpoint has " + std::to_string(entries.size()) +
                  " unknown parameters, first: " + entries.begin()->first);
  return ck;
}

}  // namespace wm
