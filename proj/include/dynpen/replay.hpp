#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "dynpen/rng.hpp"

namespace dynpen {

/// One experience record. For the regression study only `state` (the sampled
/// x) and `reward` (the target value) are meaningful. `stage_cost` and `ks`
/// keep the raw reward components so rewards can be re-priced under a changed
/// penalty factor without re-running the environment.
struct Transition {
  std::vector<double> state;
  int action = 0;
  double reward = 0.0;
  std::vector<double> next_state;
  bool terminal = false;
  double stage_cost = 0.0;
  double ks = 0.0;
};

/// Fixed-capacity ring store with uniform with-replacement sampling.
class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
    storage_.reserve(capacity);
  }

  void push(Transition t) {
    if (storage_.size() < capacity_) {
      storage_.push_back(std::move(t));
    } else {
      storage_[cursor_] = std::move(t);
    }
    cursor_ = (cursor_ + 1) % capacity_;
  }

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return storage_.empty(); }

  /// Current contents in slot order (not age order once the ring has wrapped).
  std::span<const Transition> entries() const { return storage_; }

  /// Draw `batch` entries uniformly with replacement into `out` (pointers stay
  /// valid until the next push).
  void sample(std::size_t batch, Rng& rng, std::vector<const Transition*>& out) const {
    if (storage_.empty())
      throw std::logic_error("ReplayBuffer::sample: buffer is empty");
    out.clear();
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i)
      out.push_back(&storage_[rng.uniform_index(storage_.size())]);
  }

  std::vector<Transition> sample(std::size_t batch, Rng& rng) const {
    std::vector<const Transition*> ptrs;
    sample(batch, rng, ptrs);
    std::vector<Transition> copies;
    copies.reserve(batch);
    for (const Transition* p : ptrs) copies.push_back(*p);
    return copies;
  }

private:
  std::size_t capacity_;
  std::vector<Transition> storage_;
  std::size_t cursor_ = 0;
};

}  // namespace dynpen
