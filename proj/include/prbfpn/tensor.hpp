// SPDX-License-Identifier: Apache-2.0
//
// Dense NCHW tensors and the reverse-mode tape that records operations on
// them. Every numeric type in the library is templated on the scalar so the
// gradient checker can drive the exact same code in double precision.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prbfpn/errors.hpp"

namespace prbfpn {

// 64-byte aligned storage. Vectorised kernels peel unaligned heads, so with
// plain std::vector the summation order (and thus the rounding) would depend
// on where the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  std::size_t numel() const { return storage_->data.size(); }

  std::span<const T> data() const { return storage_->data; }
  // Writable view for operators filling a freshly created output and for
  // optimizers updating parameters. Everything else treats data as frozen.
  std::span<T> mutable_data() { return storage_->data; }

  T at(int n, int c, int h, int w) const { return storage_->data[offset(n, c, h, w)]; }
  std::size_t offset(int n, int c, int h, int w) const {
    const Shape& s = storage_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }
  T item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool v) { storage_->requires_grad = v; }

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  // Allocates a zero gradient on first use.
  std::span<T> grad_mut() const;
  void zero_grad();
  void clear_grad() { AlignedVector<T>().swap(storage_->grad); }

  bool same(const Tensor& other) const { return storage_ == other.storage_; }
  // Deep copy without gradient or tape history.
  Tensor detach_copy() const;

 private:
  struct Storage {
    Shape shape;
    AlignedVector<T> data;
    AlignedVector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> storage_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so every input was produced earlier or is a leaf.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool produced(const Tensor<T>& t) const;
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Makes a tape the recording target for operators on this thread.
/// Without an active scope operators run forward only.
template <typename T>
class RecordingScope {
 public:
  explicit RecordingScope(Tape<T>& tape);
  ~RecordingScope();
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

/// Active tape when any of the inputs requires a gradient, otherwise null.
/// Operators call this before doing backward-only bookkeeping.
template <typename T>
Tape<T>* tape_for(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

/// Runs the recorded backward rules in reverse order, seeding d loss/d loss = 1.
/// Returns the number of tape entries visited.
template <typename T>
std::size_t backward(Tape<T>& tape, const Tensor<T>& loss);

}  // namespace prbfpn
