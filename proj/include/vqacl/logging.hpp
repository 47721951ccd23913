#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace vqacl {

using LogFn = std::function<void(const std::string&)>;

inline LogFn& warning_sink() {
  static LogFn sink = [](const std::string& msg) {
    std::cerr << "[vqacl] warning: " << msg << std::endl;
  };
  return sink;
}

inline void log_warning(const std::string& msg) { warning_sink()(msg); }

}  // namespace vqacl
