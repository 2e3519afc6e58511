#pragma once

#include <memory>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/shape.hpp"

namespace divot::ad {

// A named trainable tensor. Value/grad live here (outside any tape) so they
// persist across steps; m/v are AdamW moments, allocated on first use.
template <typename T>
struct Param {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> m, v;
  bool decay = true;  // weight decay applies; biases/norm gains opt out

  Param(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)) {
    const int64_t count = numel(shape);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }

  int64_t count() const { return static_cast<int64_t>(value.size()); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Owns parameters for one model; hands out stable references. Registration
// order is fixed by construction order, which keeps optimizer reductions and
// checkpoint layout deterministic.
template <typename T>
class ParamStore {
public:
  Param<T>& make(const std::string& name, Shape shape) {
    for (const auto& p : params_)
      if (p->name == name) fail_runtime("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Param<T>>(name, std::move(shape)));
    return *params_.back();
  }

  Param<T>& find(const std::string& name) {
    for (const auto& p : params_)
      if (p->name == name) return *p;
    fail_runtime("no such parameter: " + name);
  }

  std::vector<Param<T>*> all() {
    std::vector<Param<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->count();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

private:
  std::vector<std::unique_ptr<Param<T>>> params_;
};

}  // namespace divot::ad
