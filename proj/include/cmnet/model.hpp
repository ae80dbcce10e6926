#pragma once

#include <memory>

#include "cmnet/cmem.hpp"
#include "cmnet/hfaom.hpp"
#include "cmnet/sfirm.hpp"

namespace cmnet {

template <typename T>
struct ForwardPass {
  CmemOutput<T> cmem;    // f_left/f_right undefined without the half-face branches
  SfirmOutput<T> sfirm;
  Var<T> pooled;         // GAP of the refined map, N x C
  Var<T> logits;         // N x num_classes
};

template <typename T>
struct LossTerms {
  Var<T> l_sl;  // undefined when the symmetry loss is disabled
  Var<T> l_gl;
  Var<T> total;
  LossBundle bundle;
};

// Whole network: CMEM -> SFIRM -> GAP -> affine head, plus the compound loss.
template <typename T>
class CmnetModel {
 public:
  CmnetModel(ModelConfig config, Rng& rng);

  // Batches are N x 3 x H x W (whole) and N x 3 x H x W/2 (halves). The halves
  // are ignored when the configuration has no CMEM.
  ForwardPass<T> forward(const Var<T>& whole, const Var<T>& left, const Var<T>& right);
  LossTerms<T> losses(const ForwardPass<T>& pass, const Labels& labels) const;

  void set_training(bool on) noexcept { training_ = on; }
  bool training() const noexcept { return training_; }

  const ModelConfig& config() const noexcept { return config_; }
  BranchSet<T>& branches() noexcept { return branches_; }
  Sfirm<T>& sfirm() noexcept { return *sfirm_; }
  Linear<T>& head() noexcept { return head_; }

  // Distinct parameters (shared branches counted once) and BN buffers.
  ParameterRegistry<T> registry();
  std::size_t parameter_count();

  std::size_t load_pretrained(const TensorTable& weights);
  TensorTable state_table();
  // Restores every parameter and buffer; keys and shapes must match exactly.
  void load_state(const TensorTable& table);

 private:
  ModelConfig config_;
  BranchSet<T> branches_;
  std::unique_ptr<Sfirm<T>> sfirm_;
  Linear<T> head_;
  bool training_ = true;
};

}  // namespace cmnet
