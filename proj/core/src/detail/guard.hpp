// Maps exceptions escaping a command body to exit codes.

#pragma once

#include "htlab/numkit.hpp"

#include <exception>
#include <ostream>

namespace htlab::detail {

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace htlab::detail
