#pragma once

// f32 kernels with a fixed operation order. Each output element depends only
// on its own row and token, so computing a subset of tokens reproduces the
// full-sequence values bit for bit.

#include <cmath>
#include <cstring>

namespace kindepth::kernels {

using v8 = float __attribute__((vector_size(32)));

inline v8 load8(const float* p) {
  v8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline float dot(const float* a, const float* b, int n) {
  v8 acc0{}, acc1{}, acc2{}, acc3{};
  int i = 0;
  for (; i + 32 <= n; i += 32) {
    acc0 += load8(a + i) * load8(b + i);
    acc1 += load8(a + i + 8) * load8(b + i + 8);
    acc2 += load8(a + i + 16) * load8(b + i + 16);
    acc3 += load8(a + i + 24) * load8(b + i + 24);
  }
  for (; i + 8 <= n; i += 8) acc0 += load8(a + i) * load8(b + i);
  const v8 s = (acc0 + acc1) + (acc2 + acc3);
  float r = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

// y[t, o] = W[o, :] . x[t, :] + b[o]; W is out x in.
inline void linear(const float* w, const float* b, const float* x, float* y, int n_tokens, int in, int out) {
  constexpr int kRowBlock = 4;
  for (int o0 = 0; o0 < out; o0 += kRowBlock) {
    const int o1 = o0 + kRowBlock < out ? o0 + kRowBlock : out;
    for (int t = 0; t < n_tokens; ++t) {
      const float* xt = x + static_cast<std::size_t>(t) * in;
      float* yt = y + static_cast<std::size_t>(t) * out;
      for (int o = o0; o < o1; ++o) yt[o] = dot(w + static_cast<std::size_t>(o) * in, xt, in) + (b ? b[o] : 0.0f);
    }
  }
}

inline void layer_norm(const float* x, const float* g, const float* b, float eps, float* y, int d) {
  float sum = 0.0f;
  for (int i = 0; i < d; ++i) sum += x[i];
  const float mean = sum / static_cast<float>(d);
  float var = 0.0f;
  for (int i = 0; i < d; ++i) {
    const float c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<float>(d);
  const float inv = 1.0f / std::sqrt(var + eps);
  for (int i = 0; i < d; ++i) y[i] = (x[i] - mean) * inv * g[i] + b[i];
}

inline float gelu_tanh(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline float gelu_erf(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.7071067811865476f)); }

}  // namespace kindepth::kernels
