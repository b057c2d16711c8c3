// SPDX-License-Identifier: Apache-2.0

#include "itclip/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace itclip::kernels {

namespace {

std::atomic<const Ops*> g_active{nullptr};

const Ops* resolve(std::string_view name) {
  if (name == "scalar") return &scalar_ops();
  if (name == "avx2") return avx2_ops();
  if (name == "auto" || name.empty()) {
    if (const Ops* a = avx2_ops()) return a;
    return &scalar_ops();
  }
  return nullptr;
}

const Ops* initial() {
  const char* env = std::getenv("ITCLIP_KERNELS");
  const Ops* ops = resolve(env ? std::string_view(env) : std::string_view("auto"));
  return ops ? ops : &scalar_ops();
}

}  // namespace

const Ops& active() {
  const Ops* ops = g_active.load(std::memory_order_acquire);
  if (!ops) {
    ops = initial();
    g_active.store(ops, std::memory_order_release);
  }
  return *ops;
}

bool select(std::string_view name) {
  const Ops* ops = resolve(name);
  if (!ops) return false;
  g_active.store(ops, std::memory_order_release);
  return true;
}

}  // namespace itclip::kernels
