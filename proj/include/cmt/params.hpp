#pragma once

#include <string>

#include "cmt/blocks.hpp"

// Named traversal of parameter structs. Each visitor calls
//   f(const std::string& name, TensorRef tensor, bool learnable)
// for every non-empty tensor, in a fixed order. The struct argument may be
// const or mutable; the tensor reference inherits its constness. The same
// traversal drives initialization, serialization, counting and optimizer
// updates, so the order here is part of the on-disk and RNG contract.

namespace cmt::params {

template <typename T, typename F>
void visit_tensor(const std::string& name, T& tensor, bool learnable, F& f) {
  if (!tensor.empty()) f(name, tensor, learnable);
}

template <typename C, typename F>
void visit_conv(const std::string& prefix, C& conv, F& f) {
  visit_tensor(prefix + ".weight", conv.kernel, true, f);
  visit_tensor(prefix + ".bias", conv.bias, true, f);
}

template <typename L, typename F>
void visit_linear(const std::string& prefix, L& lin, F& f) {
  visit_tensor(prefix + ".weight", lin.weight, true, f);
  visit_tensor(prefix + ".bias", lin.bias, true, f);
}

template <typename N, typename F>
void visit_layer_norm(const std::string& prefix, N& ln, F& f) {
  visit_tensor(prefix + ".gamma", ln.gamma, true, f);
  visit_tensor(prefix + ".beta", ln.beta, true, f);
}

template <typename B, typename F>
void visit_batch_norm(const std::string& prefix, B& bn, F& f) {
  visit_tensor(prefix + ".gamma", bn.gamma, true, f);
  visit_tensor(prefix + ".beta", bn.beta, true, f);
  visit_tensor(prefix + ".running_mean", bn.running_mean, false, f);
  visit_tensor(prefix + ".running_var", bn.running_var, false, f);
}

template <typename P, typename F>
void visit_lpu(const std::string& prefix, P& p, F& f) {
  visit_conv(prefix + ".dw", p.dw, f);
}

template <typename P, typename F>
void visit_lmhsa(const std::string& prefix, P& p, F& f) {
  visit_linear(prefix + ".q", p.q, f);
  visit_linear(prefix + ".k", p.k, f);
  visit_linear(prefix + ".v", p.v, f);
  visit_conv(prefix + ".dw_k", p.dw_k, f);
  visit_conv(prefix + ".dw_v", p.dw_v, f);
  visit_linear(prefix + ".o", p.o, f);
}

template <typename P, typename F>
void visit_irffn(const std::string& prefix, P& p, F& f) {
  visit_linear(prefix + ".expand", p.expand, f);
  visit_batch_norm(prefix + ".bn1", p.bn1, f);
  visit_conv(prefix + ".dw", p.dw, f);
  visit_batch_norm(prefix + ".bn2", p.bn2, f);
  visit_linear(prefix + ".project", p.project, f);
  visit_batch_norm(prefix + ".bn3", p.bn3, f);
}

template <typename P, typename F>
void visit_ffn(const std::string& prefix, P& p, F& f) {
  visit_linear(prefix + ".fc1", p.fc1, f);
  visit_linear(prefix + ".fc2", p.fc2, f);
}

template <typename P, typename F>
void visit_block(const std::string& prefix, P& p, F& f) {
  visit_lpu(prefix + ".lpu", p.lpu, f);
  visit_layer_norm(prefix + ".ln1", p.ln1, f);
  visit_lmhsa(prefix + ".attn", p.attn, f);
  visit_layer_norm(prefix + ".ln2", p.ln2, f);
  visit_irffn(prefix + ".ffn", p.ffn, f);
}

template <typename P, typename F>
void visit_stem(const std::string& prefix, P& p, F& f) {
  for (int i = 0; i < 3; ++i) {
    visit_conv(prefix + ".conv" + std::to_string(i), p.conv[i], f);
    visit_batch_norm(prefix + ".bn" + std::to_string(i), p.bn[i], f);
  }
}

template <typename P, typename F>
void visit_patch_agg(const std::string& prefix, P& p, F& f) {
  visit_conv(prefix + ".conv", p.conv, f);
  visit_layer_norm(prefix + ".ln", p.ln, f);
}

}  // namespace cmt::params
