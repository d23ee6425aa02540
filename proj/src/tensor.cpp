// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace prbfpn {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

namespace {

void check_dims(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + s.str());
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : storage_(std::make_shared<Storage>()) {
  check_dims(shape);
  storage_->shape = shape;
  storage_->data.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<Storage>()) {
  check_dims(shape);
  if (values.size() != shape.numel()) {
    throw ShapeError("tensor of shape " + shape.str() + " needs " + std::to_string(shape.numel()) +
                     " values, got " + std::to_string(values.size()));
  }
  storage_->shape = shape;
  storage_->data.assign(values.begin(), values.end());
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape().str());
  return storage_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() const {
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), T(0));
  return storage_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach_copy() const {
  Tensor<T> out;
  out.storage_ = std::make_shared<Storage>();
  out.storage_->shape = shape();
  out.storage_->data = storage_->data;
  return out;
}

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                     std::function<void()> backward) {
  entries_.push_back(Entry{std::string(op), std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
bool Tape<T>::produced(const Tensor<T>& t) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.output.same(t); });
}

namespace {

template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
RecordingScope<T>::RecordingScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
RecordingScope<T>::~RecordingScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
std::size_t backward(Tape<T>& tape, const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " +
                        (loss.defined() ? loss.shape().str() : std::string("undefined tensor")));
  }
  if (!tape.produced(loss)) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  Tensor<T> seed = loss;
  seed.grad_mut()[0] += T(1);
  std::size_t visited = 0;
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    ++visited;
    if (it->output.has_grad()) it->backward();
  }
  return visited;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class RecordingScope<float>;
template class RecordingScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template std::size_t backward<float>(Tape<float>&, const Tensor<float>&);
template std::size_t backward<double>(Tape<double>&, const Tensor<double>&);

}  // namespace prbfpn
