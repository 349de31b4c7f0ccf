#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gqvae/core/graph.hpp"
#include "gqvae/core/ops.hpp"
#include "gqvae/core/rng.hpp"

namespace gqvae::model {

using nn::Array;
using nn::Graph;
using nn::Shape;
using nn::ParameterStore;
using nn::Var;

template <typename T>
Array<T> normal_array(Shape shape, double stddev, Rng& rng) {
  Array<T> a(std::move(shape));
  for (auto& v : a.storage()) v = static_cast<T>(rng.normal() * stddev);
  return a;
}

template <typename T>
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;

  static Linear create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng, double gain = 1.0) {
    Linear l;
    l.weight = store.add(name + ".weight",
                         normal_array<T>({in, out}, gain / std::sqrt(double(in)), rng), true);
    l.bias = store.add(name + ".bias", Array<T>(Shape{out}), false);
    return l;
  }

  Var<T> operator()(Graph<T>& g, ParameterStore<T>& store, Var<T> x) const {
    return nn::linear(x, g.param(store, weight), g.param(store, bias));
  }
};

template <typename T>
struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static LayerNorm create(ParameterStore<T>& store, const std::string& name, std::size_t d) {
    LayerNorm l;
    l.gamma = store.add(name + ".gamma", Array<T>(Shape{d}, T(1)), false);
    l.beta = store.add(name + ".beta", Array<T>(Shape{d}), false);
    return l;
  }

  Var<T> operator()(Graph<T>& g, ParameterStore<T>& store, Var<T> x) const {
    return nn::layer_norm(x, g.param(store, gamma), g.param(store, beta));
  }
};

/// Pre-norm bidirectional transformer block over (batch*seq x d) rows.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> qkv, proj, fc1, fc2;
  std::size_t heads = 1;

  static TransformerBlock create(ParameterStore<T>& store, const std::string& name,
                                 std::size_t d, std::size_t heads, std::size_t ffn_mult,
                                 std::size_t depth, Rng& rng) {
    const double residual_gain = 1.0 / std::sqrt(2.0 * double(depth));
    TransformerBlock b;
    b.heads = heads;
    b.ln1 = LayerNorm<T>::create(store, name + ".ln1", d);
    b.qkv = Linear<T>::create(store, name + ".qkv", d, 3 * d, rng);
    b.proj = Linear<T>::create(store, name + ".proj", d, d, rng, residual_gain);
    b.ln2 = LayerNorm<T>::create(store, name + ".ln2", d);
    b.fc1 = Linear<T>::create(store, name + ".fc1", d, ffn_mult * d, rng);
    b.fc2 = Linear<T>::create(store, name + ".fc2", ffn_mult * d, d, rng, residual_gain);
    return b;
  }

  Var<T> operator()(Graph<T>& g, ParameterStore<T>& store, Var<T> x, std::size_t batch,
                    std::size_t seq, std::span<const std::uint8_t> key_mask) const {
    Var<T> h = qkv(g, store, ln1(g, store, x));
    h = nn::self_attention(h, batch, seq, heads, key_mask);
    x = nn::add(x, proj(g, store, h));
    h = nn::gelu(fc1(g, store, ln2(g, store, x)));
    return nn::add(x, fc2(g, store, h));
  }
};

/// Learned positions, a block stack and a final norm.
template <typename T>
struct TransformerStack {
  std::size_t positions = 0;
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_f;

  static TransformerStack create(ParameterStore<T>& store, const std::string& name,
                                 std::size_t d, std::size_t s_max, std::size_t layers,
                                 std::size_t heads, std::size_t ffn_mult, Rng& rng) {
    TransformerStack s;
    s.positions = store.add(name + ".pos", normal_array<T>({s_max, d}, 0.1, rng), false);
    for (std::size_t l = 0; l < layers; ++l) {
      s.blocks.push_back(TransformerBlock<T>::create(
          store, name + ".block" + std::to_string(l), d, heads, ffn_mult, layers, rng));
    }
    s.ln_f = LayerNorm<T>::create(store, name + ".ln_f", d);
    return s;
  }

  Var<T> operator()(Graph<T>& g, ParameterStore<T>& store, Var<T> x, std::size_t batch,
                    std::size_t seq, std::span<const std::uint8_t> key_mask) const {
    x = nn::add_periodic(x, g.param(store, positions), seq);
    for (const auto& b : blocks) x = b(g, store, x, batch, seq, key_mask);
    return ln_f(g, store, x);
  }
};

}  // namespace gqvae::model
