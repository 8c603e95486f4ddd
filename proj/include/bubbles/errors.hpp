#pragma once

#include <stdexcept>
#include <string>

namespace bubbles {

// Base for all library errors. `kind()` is the stable machine-readable name
// used by the CLI to map failures onto exit codes and messages.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define BUBBLES_DEFINE_ERROR(Name)                                  \
    class Name : public Error {                                     \
    public:                                                         \
        explicit Name(const std::string& what) : Error(#Name, what) {} \
    }

BUBBLES_DEFINE_ERROR(MalformedDecomposition);
BUBBLES_DEFINE_ERROR(SingularGroupMatrix);
BUBBLES_DEFINE_ERROR(NoPositiveSolution);
BUBBLES_DEFINE_ERROR(EigenvalueThreeMissing);
BUBBLES_DEFINE_ERROR(QuadratureNotConverged);
BUBBLES_DEFINE_ERROR(PointOutsideDomain);
BUBBLES_DEFINE_ERROR(TooCloseToBoundary);
BUBBLES_DEFINE_ERROR(SeriesNotConverged);
BUBBLES_DEFINE_ERROR(SolverNotConverged);
BUBBLES_DEFINE_ERROR(NoCriticalPointFound);
BUBBLES_DEFINE_ERROR(BasisStateMismatch);
BUBBLES_DEFINE_ERROR(NoContraction);
BUBBLES_DEFINE_ERROR(LinearSolveFailed);
BUBBLES_DEFINE_ERROR(IllConditionedFit);
BUBBLES_DEFINE_ERROR(DegenerateRegression);
BUBBLES_DEFINE_ERROR(ResolutionTooCoarse);
BUBBLES_DEFINE_ERROR(ExitedXeta);
BUBBLES_DEFINE_ERROR(ConfigParseError);

#undef BUBBLES_DEFINE_ERROR

} // namespace bubbles
