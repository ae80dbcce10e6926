#include "cmnet/model.hpp"

#include <set>

namespace cmnet {

template <typename T>
CmnetModel<T>::CmnetModel(ModelConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  Rng branch_rng = rng.fork("branches");
  Rng sfirm_rng = rng.fork("sfirm");
  Rng head_rng = rng.fork("head");
  branches_ = build_branches<T>(config_, config_.use_cmem, branch_rng);
  sfirm_ = std::make_unique<Sfirm<T>>(config_, sfirm_rng);
  head_ = Linear<T>(sfirm_->out_channels(), config_.num_classes, true, head_rng);
}

template <typename T>
ForwardPass<T> CmnetModel<T>::forward(const Var<T>& whole, const Var<T>& left,
                                      const Var<T>& right) {
  ForwardPass<T> pass;
  if (config_.use_cmem) {
    pass.cmem = cmem_forward(whole, left, right, branches_, training_);
  } else {
    pass.cmem.structural = (*branches_.sb)(whole, training_);
    pass.cmem.fused = pass.cmem.structural;
  }
  pass.sfirm = (*sfirm_)(pass.cmem.fused, training_);
  pass.pooled = global_avg_pool(pass.sfirm.refined);
  pass.logits = head_(pass.pooled);
  return pass;
}

template <typename T>
LossTerms<T> CmnetModel<T>::losses(const ForwardPass<T>& pass, const Labels& labels) const {
  LossTerms<T> terms;
  terms.l_gl = global_loss(pass.logits, labels);
  if (pass.cmem.f_left.defined()) terms.l_sl = symmetry_loss(pass.cmem.f_left, pass.cmem.f_right);
  const double alpha = config_.effective_alpha();
  terms.total = combine_losses(terms.l_sl, terms.l_gl, alpha);
  terms.bundle.alpha = alpha;
  terms.bundle.l_gl = terms.l_gl.value()[0];
  terms.bundle.l_sl = terms.l_sl.defined() ? static_cast<double>(terms.l_sl.value()[0]) : 0.0;
  terms.bundle.total = terms.total.value()[0];
  return terms;
}

template <typename T>
ParameterRegistry<T> CmnetModel<T>::registry() {
  ParameterRegistry<T> reg;
  for (const auto& [name, extractor] : branches_.distinct()) extractor->collect(name + ".", reg);
  sfirm_->collect("sfirm.", reg);
  head_.collect("head.", reg);
  return reg;
}

template <typename T>
std::size_t CmnetModel<T>::parameter_count() {
  return registry().parameter_count();
}

template <typename T>
std::size_t CmnetModel<T>::load_pretrained(const TensorTable& weights) {
  return cmnet::load_pretrained(weights, branches_, sfirm_->basic_network_ii());
}

template <typename T>
TensorTable CmnetModel<T>::state_table() {
  TensorTable table;
  ParameterRegistry<T> reg = registry();
  for (const auto& p : reg.parameters()) {
    table.set(p.name, p.var.value().template cast<double>(), storage_type_of<T>());
  }
  for (const auto& b : reg.buffers()) {
    table.set(b.name, b.tensor->template cast<double>(), storage_type_of<T>());
  }
  return table;
}

template <typename T>
void CmnetModel<T>::load_state(const TensorTable& table) {
  ParameterRegistry<T> reg = registry();
  std::set<std::string> expected;
  const auto check = [&](const std::string& name, const Shape& shape) {
    expected.insert(name);
    const auto it = table.tensors.find(name);
    if (it == table.tensors.end()) throw LoadError("state is missing key '" + name + "'");
    if (it->second.shape() != shape) {
      throw LoadError("shape mismatch for '" + name + "': model expects " + shape_string(shape) +
                      ", state has " + shape_string(it->second.shape()));
    }
  };
  for (const auto& p : reg.parameters()) check(p.name, p.var.shape());
  for (const auto& b : reg.buffers()) check(b.name, b.tensor->shape());
  for (const auto& [name, tensor] : table.tensors) {
    if (!expected.count(name)) throw LoadError("state has unexpected key '" + name + "'");
  }
  for (const auto& p : reg.parameters()) {
    Var<T> var = p.var;
    const Tensor<double>& src = table.tensors.at(p.name);
    for (std::size_t i = 0; i < src.numel(); ++i) var.mutable_value()[i] = static_cast<T>(src[i]);
  }
  for (const auto& b : reg.buffers()) {
    const Tensor<double>& src = table.tensors.at(b.name);
    for (std::size_t i = 0; i < src.numel(); ++i) (*b.tensor)[i] = static_cast<T>(src[i]);
  }
}

template class CmnetModel<float>;
template class CmnetModel<double>;

}  // namespace cmnet
