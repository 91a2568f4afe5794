#include "diffvar/parallel.hpp"

#include <cstdlib>
#include <string>

namespace diffvar {

std::size_t worker_count() {
  std::size_t count = std::max<unsigned>(std::thread::hardware_concurrency(), 1u);
  if (const char* cap = std::getenv("DIFFVAR_THREADS"); cap != nullptr && *cap != '\0') {
    try {
      const long value = std::stol(cap);
      if (value >= 1) count = static_cast<std::size_t>(value);
    } catch (const std::exception&) {
      // unparsable values leave the default in place
    }
  }
  return count;
}

}  // namespace diffvar
