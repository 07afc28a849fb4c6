#pragma once

// Library version plus the git revision baked in at configure time.

#ifndef CRLEARN_GIT_REV
#define CRLEARN_GIT_REV "unknown"
#endif

namespace crlearn {

inline constexpr const char* kVersion = "0.1.0";

inline const char* version_string() {
  static const char s[] = "crlearn " "0.1.0" " (" CRLEARN_GIT_REV ")";
  return s;
}

}  // namespace crlearn
