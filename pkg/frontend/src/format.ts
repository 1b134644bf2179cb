/** Display formatting that never alters the underlying value.
 *
 * The detail table must show exactly what the API sent: values render
 * via String(), so the full double round-trips visibly; any shortened
 * display form lives only in secondary UI chrome (e.g. badges).
 */

export function exactValue(value: number | null): string {
  return value === null ? 'n/a' : String(value);
}

/** Badge text only; the exact value stays available elsewhere. */
export function probabilityBadge(value: number | null): string {
  if (value === null) {
    return 'rules';
  }
  return value.toFixed(3);
}
