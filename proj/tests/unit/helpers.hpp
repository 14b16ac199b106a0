#pragma once

#include <gtest/gtest.h>

#include "factrace/error.hpp"
#include "factrace/model.hpp"
#include "oracle.hpp"

#define EXPECT_FACTRACE_ERROR(stmt, expected_kind)                                   \
  do {                                                                               \
    try {                                                                            \
      stmt;                                                                          \
      ADD_FAILURE() << "expected factrace::Error";                                   \
    } catch (const factrace::Error& e__) {                                           \
      EXPECT_EQ(e__.kind(), expected_kind) << e__.what();                            \
    }                                                                                \
  } while (0)

inline oracle::Site to_oracle(const factrace::HookSite& s) {
  using factrace::HookKind;
  switch (s.kind) {
    case HookKind::embed: return {oracle::Kind::embed, -1, s.position};
    case HookKind::hidden: return {oracle::Kind::hidden, s.layer, s.position};
    case HookKind::attn_out: return {oracle::Kind::attn, s.layer, s.position};
    case HookKind::mlp_out: return {oracle::Kind::mlp, s.layer, s.position};
  }
  return {};
}

inline std::vector<int> as_ints(const std::vector<factrace::TokenId>& ids) { return {ids.begin(), ids.end()}; }
