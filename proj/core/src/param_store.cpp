#include "switchbert/param_store.hpp"

namespace switchbert {

Tensor& ParamStore::add(std::string name, Tensor tensor) {
  if (!tensor.defined()) throw ContractError("ParamStore::add: undefined tensor for '" + name + "'");
  if (!tensor.is_leaf()) throw ContractError("ParamStore::add: '" + name + "' is not a leaf");
  if (index_.contains(name)) throw ContractError("ParamStore::add: duplicate name '" + name + "'");
  tensor.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(tensor)});
  return entries_.back().tensor;
}

bool ParamStore::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

Tensor& ParamStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("ParamStore: no parameter named '" + std::string(name) + "'");
  return entries_[it->second].tensor;
}

const Tensor& ParamStore::get(std::string_view name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

}  // namespace switchbert
