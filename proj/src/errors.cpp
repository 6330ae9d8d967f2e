#include "coiba/errors.hpp"

namespace coiba {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Index: return "index";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Stats: return "stats";
    case ErrorKind::Optimization: return "optimization";
    case ErrorKind::Training: return "training";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Io: return "io";
    case ErrorKind::Imputation: return "imputation";
  }
  return "unknown";
}

}  // namespace coiba
