#pragma once

// Thin RAII layer over the SQLite C API.

#include "gflowstate/errors.hpp"

#include <sqlite3.h>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

namespace gflowstate::sql {

struct DbCloser {
  void operator()(sqlite3 *db) const { sqlite3_close_v2(db); }
};
using DbHandle = std::unique_ptr<sqlite3, DbCloser>;

struct StmtFinalizer {
  void operator()(sqlite3_stmt *s) const { sqlite3_finalize(s); }
};

inline DbHandle open(const std::string &path, bool read_only) {
  sqlite3 *raw = nullptr;
  const int flags = read_only ? SQLITE_OPEN_READONLY : (SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE);
  const int rc = sqlite3_open_v2(path.c_str(), &raw, flags | SQLITE_OPEN_FULLMUTEX, nullptr);
  DbHandle db(raw);
  if (rc != SQLITE_OK)
    throw StoreError("cannot open database '" + path + "': " +
                     (raw ? sqlite3_errmsg(raw) : sqlite3_errstr(rc)));
  sqlite3_busy_timeout(raw, 5000);
  return db;
}

inline void exec(sqlite3 *db, const std::string &sql) {
  char *err = nullptr;
  if (sqlite3_exec(db, sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
    std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw StoreError(msg + " in: " + sql);
  }
}

class Statement {
public:
  Statement(sqlite3 *db, std::string_view sql) : db_(db) {
    sqlite3_stmt *raw = nullptr;
    if (sqlite3_prepare_v2(db, sql.data(), static_cast<int>(sql.size()), &raw, nullptr) != SQLITE_OK)
      throw StoreError(std::string(sqlite3_errmsg(db)) + " in: " + std::string(sql));
    stmt_.reset(raw);
  }

  Statement &bind(int i, std::int64_t v) {
    check(sqlite3_bind_int64(stmt_.get(), i, v));
    return *this;
  }
  Statement &bind(int i, int v) { return bind(i, static_cast<std::int64_t>(v)); }
  Statement &bind(int i, double v) {
    check(sqlite3_bind_double(stmt_.get(), i, v));
    return *this;
  }
  Statement &bind(int i, std::string_view v) {
    check(sqlite3_bind_text(stmt_.get(), i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
    return *this;
  }
  Statement &bind(int i, const std::string &v) { return bind(i, std::string_view(v)); }
  Statement &bind(int i, const char *v) { return bind(i, std::string_view(v)); }
  Statement &bind(int i, std::optional<double> v) {
    if (v)
      return bind(i, *v);
    check(sqlite3_bind_null(stmt_.get(), i));
    return *this;
  }

  // True while a row is available.
  bool step() {
    const int rc = sqlite3_step(stmt_.get());
    if (rc == SQLITE_ROW)
      return true;
    if (rc == SQLITE_DONE)
      return false;
    throw StoreError(sqlite3_errmsg(db_));
  }

  void run() {
    while (step()) {
    }
    reset();
  }

  void reset() {
    sqlite3_reset(stmt_.get());
    sqlite3_clear_bindings(stmt_.get());
  }

  std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_.get(), col); }
  double real(int col) const { return sqlite3_column_double(stmt_.get(), col); }
  bool is_null(int col) const { return sqlite3_column_type(stmt_.get(), col) == SQLITE_NULL; }
  std::optional<double> optional_real(int col) const {
    if (is_null(col))
      return std::nullopt;
    return real(col);
  }
  std::string text(int col) const {
    const auto *p = sqlite3_column_text(stmt_.get(), col);
    return p ? std::string(reinterpret_cast<const char *>(p),
                           static_cast<std::size_t>(sqlite3_column_bytes(stmt_.get(), col)))
             : std::string();
  }
  int columns() const { return sqlite3_column_count(stmt_.get()); }
  int type(int col) const { return sqlite3_column_type(stmt_.get(), col); }

private:
  void check(int rc) {
    if (rc != SQLITE_OK)
      throw StoreError(sqlite3_errmsg(db_));
  }

  sqlite3 *db_;
  std::unique_ptr<sqlite3_stmt, StmtFinalizer> stmt_;
};

// Commits on commit(), rolls back otherwise.
class Transaction {
public:
  explicit Transaction(sqlite3 *db) : db_(db) { exec(db_, "BEGIN IMMEDIATE"); }
  Transaction(const Transaction &) = delete;
  Transaction &operator=(const Transaction &) = delete;
  ~Transaction() {
    if (!done_)
      sqlite3_exec(db_, "ROLLBACK", nullptr, nullptr, nullptr);
  }
  void commit() {
    exec(db_, "COMMIT");
    done_ = true;
  }

private:
  sqlite3 *db_;
  bool done_ = false;
};

} // namespace gflowstate::sql
