#pragma once

#include "support/doctest_torch.hpp"

#include <functional>

#include "gpc/error.hpp"

namespace gpc::testing {

// Kind of the gpc::Error raised by f; fails the test if nothing is thrown.
inline ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::BadConfig;
}

}  // namespace gpc::testing
