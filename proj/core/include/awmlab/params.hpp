#pragma once

#include <string>
#include <vector>

#include "awmlab/array.hpp"
#include "awmlab/tape.hpp"

namespace awmlab {

/// Optional metadata stored in a checkpoint's JSON manifest. Plain nets leave
/// every field empty; world-model checkpoints fill them so a loader can refuse
/// mismatched shapes before touching weights.
struct CheckpointHeader {
  std::string family;    // empty for bare parameter sets
  std::string backbone;
  int state_dim = 0;
  int action_dim = 0;
  int horizon = 0;
};

/// Owns the persistent weights of one trainable object, in a stable order.
/// Forward passes bind entries onto a tape (one leaf per entry, or constants
/// when the object is frozen); optimizers update the stored arrays in place.
class ParamStore {
 public:
  int add(std::string name, Array init);
  size_t count() const { return entries_.size(); }
  int64_t total_params() const;

  Array& value(int idx) { return entries_[static_cast<size_t>(idx)].value; }
  const Array& value(int idx) const { return entries_[static_cast<size_t>(idx)].value; }
  const std::string& name(int idx) const { return entries_[static_cast<size_t>(idx)].name; }

  /// One tracked leaf per entry, index-aligned with the store.
  std::vector<Value> bind(Tape& t) const;
  /// Constants instead of leaves: gradients stop at the parameters, which is
  /// how a frozen model takes part in someone else's backward pass.
  std::vector<Value> bind_frozen() const;

  /// Collects d(output)/d(entry) for every entry from a finished backward pass.
  std::vector<Array> grads_of(const Gradients& g, const std::vector<Value>& bound) const;

  /// Serialization: `<prefix>.f64` holds every value concatenated row-major as
  /// little-endian 64-bit floats; `<prefix>.json` is the shape manifest (name,
  /// shape, element offset per entry) plus the header.
  void save(const std::string& prefix, const CheckpointHeader& header = {}) const;
  /// Loads weights into an existing store with identical layout; returns the
  /// manifest header. Throws on any name/shape/size mismatch.
  CheckpointHeader load(const std::string& prefix);

 private:
  struct Entry {
    std::string name;
    Array value;
    Array m, v;  // Adam moments, sized on first optimizer step
  };
  std::vector<Entry> entries_;
  friend class Adam;
};

struct GradNorms {
  double pre_clip = 0.0;
  double post_clip = 0.0;
  bool clipped = false;
};

/// Plain Adam with bias correction. clip > 0 rescales the whole gradient list
/// to global L2 norm <= clip before the update.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  GradNorms step(ParamStore& store, std::vector<Array> grads, double clip = 0.0);
  double lr() const { return lr_; }
  int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

/// Global L2 norm across a gradient list.
double global_norm(const std::vector<Array>& grads);

}  // namespace awmlab
