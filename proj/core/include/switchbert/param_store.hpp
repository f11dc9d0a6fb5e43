#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "switchbert/tensor.hpp"

namespace switchbert {

/// Named trainable tensors in insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  /// Registers a leaf and enables its gradient. Names must be unique.
  Tensor& add(std::string name, Tensor tensor);

  bool contains(std::string_view name) const;
  Tensor& get(std::string_view name);
  const Tensor& get(std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t total_elements() const;

  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace switchbert
