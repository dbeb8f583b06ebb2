#include "care/solution_store.hpp"

#include "care/error.hpp"

namespace care {

const AnnotatedSolution& SolutionStore::write(std::string body, std::uint64_t revision_basis) {
    if (!drafting_) {
        throw Error(ErrorCode::WriteOutsideDrafting, "solutions are written only while drafting");
    }
    return put(annotate_solution(std::move(body), revision_basis));
}

const AnnotatedSolution& SolutionStore::put(AnnotatedSolution solution) {
    current_ = std::move(solution);
    ++writes_;
    if (listener_) listener_(*current_);
    return *current_;
}

}  // namespace care
